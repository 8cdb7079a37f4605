//! Round-based self-training: offline pseudolabel generation, scheduled
//! pseudolabel dropping, per-round model re-initialization, and two-model
//! ensembling at test time.

use std::fs;
use std::path::Path;

use rand_chacha::ChaCha8Rng;

use crate::augment::{lab_style, AugConfig};
use crate::data::{
    class_frequencies, write_pgm, Batch, BatchCounts, BatchSampler, LabeledImage, Role, SampleSet,
    IGNORE_LABEL,
};
use crate::error::{Error, Result};
use crate::eval::{iou, ConfusionMatrix, IouReport};
use crate::losses::{
    argmax_labels, batch_to_tensor, class_weights, softmax_probs, total_loss, LossConfig, Setting,
};
use crate::model::{forward_seg, load_checkpoint, save_checkpoint, Mode, ModelPair, TinySegConfig};
use crate::rng::{derive_rng, stream_seed};
use crate::scalar::Scalar;
use crate::tensor::{clip_grad_total_norm, sgd_nesterov_step, ParamSet};

/// Source-image restyling applied when batches are assembled.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Styling {
    None,
    Lab,
}

impl Styling {
    pub fn parse(s: &str) -> Result<Styling> {
        match s {
            "none" => Ok(Styling::None),
            "lab" => Ok(Styling::Lab),
            other => Err(Error::Config(format!(
                "unknown styling {other:?} (expected none or lab)"
            ))),
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            Styling::None => "none",
            Styling::Lab => "lab",
        }
    }
}

/// Round schedule: K extra rounds after round 0, per-round step budget, the
/// step at which pseudolabels are dropped, and the confidence threshold.
#[derive(Debug, Clone, PartialEq)]
pub struct SelfTrainPlan {
    pub rounds: usize,
    pub n_steps: u64,
    pub n_drop: u64,
    pub tau: f64,
}

impl Default for SelfTrainPlan {
    fn default() -> Self {
        SelfTrainPlan {
            rounds: 2,
            n_steps: 2000,
            n_drop: 1000,
            tau: 0.9,
        }
    }
}

impl SelfTrainPlan {
    pub fn validate(&self) -> Result<()> {
        if self.n_drop == 0 || self.n_drop >= self.n_steps {
            return Err(Error::Config(format!(
                "n_drop must satisfy 0 < n_drop < n_steps, got {} / {}",
                self.n_drop, self.n_steps
            )));
        }
        if !(self.tau > 0.0 && self.tau <= 1.0) {
            return Err(Error::Config(format!(
                "confidence threshold must be in (0, 1], got {}",
                self.tau
            )));
        }
        Ok(())
    }

    /// First step at the reduced learning rate: 75% into the round,
    /// rounded up.
    pub fn lr_drop_step(&self) -> u64 {
        (3 * self.n_steps).div_ceil(4)
    }
}

/// The three training streams.
#[derive(Debug, Clone)]
pub struct TrainSets {
    pub source: SampleSet,
    pub target_labeled: SampleSet,
    pub target_unlabeled: SampleSet,
}

/// Everything one training round needs besides the schedule: architecture,
/// loss/augmentation settings, optimizer hyperparameters, and the ablation
/// switches. The `loss` alpha vectors are recomputed per round from set
/// frequencies while `class_weights` is on.
#[derive(Debug, Clone)]
pub struct TrainerConfig {
    pub setting: Setting,
    pub model: TinySegConfig,
    pub loss: LossConfig,
    pub aug: AugConfig,
    pub counts: BatchCounts,
    pub batch_mix: bool,
    pub class_weights: bool,
    pub styling: Styling,
    pub no_pl_drop: bool,
    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub clip_norm: f64,
    pub mu_cap: f64,
}

impl TrainerConfig {
    pub fn for_model(model: TinySegConfig) -> Self {
        let loss = LossConfig::for_classes(model.num_classes);
        TrainerConfig {
            setting: Setting::Ssda,
            model,
            loss,
            aug: AugConfig::default(),
            counts: BatchCounts::default(),
            batch_mix: true,
            class_weights: true,
            styling: Styling::None,
            no_pl_drop: false,
            lr: 1e-3,
            momentum: 0.9,
            weight_decay: 5e-4,
            clip_norm: 10.0,
            mu_cap: 0.995,
        }
    }
}

impl Default for TrainerConfig {
    fn default() -> Self {
        TrainerConfig::for_model(TinySegConfig::default())
    }
}

/// One pseudolabeled image: argmax where the producing model was confident,
/// ignore everywhere else.
#[derive(Debug, Clone, PartialEq)]
pub struct PseudoLabel {
    pub id: String,
    pub label: Vec<u8>,
    pub coverage: f64,
}

/// Pseudolabels for a whole unlabeled set, tagged with the content hash of
/// the parameters that produced them.
#[derive(Debug, Clone, PartialEq)]
pub struct PseudoLabelSet {
    pub producer: u64,
    pub size: usize,
    pub items: Vec<PseudoLabel>,
}

impl PseudoLabelSet {
    pub fn mean_coverage(&self) -> f64 {
        if self.items.is_empty() {
            return 0.0;
        }
        self.items.iter().map(|p| p.coverage).sum::<f64>() / self.items.len() as f64
    }
}

/// Labels every pixel whose max softmax under `params` (eval mode) reaches
/// `tau`; the rest carry the ignore value. Deterministic in its inputs;
/// `tau` is expected to come from a validated plan.
pub fn generate_pseudolabels<S: Scalar>(
    params: &ParamSet<S>,
    mcfg: &TinySegConfig,
    unlabeled: &SampleSet,
    tau: f64,
) -> Result<PseudoLabelSet> {
    let size = unlabeled.size().unwrap_or(0);
    let mut items = Vec::with_capacity(unlabeled.items.len());
    for it in &unlabeled.items {
        let x = batch_to_tensor::<S>(&[&it.image], it.size)?;
        let logits = forward_seg(params, mcfg, &x, Mode::Eval)?;
        let probs = softmax_probs(&logits)?;
        let hw = it.size * it.size;
        let c = mcfg.num_classes;
        let mut label = vec![IGNORE_LABEL; hw];
        let mut kept = 0usize;
        for px in 0..hw {
            let mut best = 0usize;
            for ci in 1..c {
                if probs[ci * hw + px] > probs[best * hw + px] {
                    best = ci;
                }
            }
            if probs[best * hw + px] >= tau {
                label[px] = best as u8;
                kept += 1;
            }
        }
        items.push(PseudoLabel {
            id: it.id.clone(),
            label,
            coverage: kept as f64 / hw as f64,
        });
    }
    Ok(PseudoLabelSet {
        producer: params.content_hash(),
        size,
        items,
    })
}

/// Writes one PGM label map per image plus `coverage.txt` (producer hash
/// line, then one `<id> <coverage>` line per image, in set order).
pub fn write_pseudolabel_dir(dir: &Path, pl: &PseudoLabelSet) -> Result<()> {
    fs::create_dir_all(dir)?;
    let mut cov = format!("producer={:016x}\n", pl.producer);
    for item in &pl.items {
        write_pgm(
            &dir.join(format!("{}.pgm", item.id)),
            pl.size,
            pl.size,
            &item.label,
        )?;
        cov.push_str(&format!("{} {:.6}\n", item.id, item.coverage));
    }
    fs::write(dir.join("coverage.txt"), cov)?;
    Ok(())
}

/// D_{t+û}: the labeled target set with the pseudolabeled images appended.
/// Ground-truth members keep their own labels untouched. `expected_producer`
/// pins the pseudolabels to the checkpoint that generated them.
pub fn merge_pseudolabels(
    target_labeled: &SampleSet,
    unlabeled: &SampleSet,
    pl: &PseudoLabelSet,
    expected_producer: u64,
) -> Result<SampleSet> {
    if pl.producer != expected_producer {
        return Err(Error::Integrity(format!(
            "pseudolabels were produced by {:016x}, expected {:016x}",
            pl.producer, expected_producer
        )));
    }
    if pl.items.len() != unlabeled.items.len() {
        return Err(Error::Integrity(format!(
            "pseudolabel count {} does not match unlabeled set size {}",
            pl.items.len(),
            unlabeled.items.len()
        )));
    }
    let mut items = target_labeled.items.clone();
    for (img, p) in unlabeled.items.iter().zip(&pl.items) {
        if img.id != p.id {
            return Err(Error::Integrity(format!(
                "pseudolabel id {} does not match image id {}",
                p.id, img.id
            )));
        }
        items.push(LabeledImage {
            id: img.id.clone(),
            size: img.size,
            image: img.image.clone(),
            label: Some(p.label.clone()),
        });
    }
    Ok(SampleSet {
        role: Role::TargetPseudolabeled,
        items,
    })
}

/// Everything logged per optimization step.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepMetrics {
    pub round: usize,
    pub step: u64,
    pub lr: f64,
    pub total: f64,
    pub sup_source: f64,
    pub sup_target: f64,
    pub cr: f64,
    pub pc: f64,
    pub grad_norm: f64,
    pub mu: f64,
}

/// Hooks into a running training; default methods ignore everything.
pub trait RunObserver<S: Scalar> {
    fn on_step(&mut self, metrics: &StepMetrics) {
        let _ = metrics;
    }
    /// Called once per freshly trained round (not for rounds skipped on
    /// resume), after its checkpoint is on disk.
    fn on_round(&mut self, k: usize, pair: &ModelPair<S>) -> Result<()> {
        let _ = (k, pair);
        Ok(())
    }
}

/// Observer that discards everything.
pub struct SilentObserver;

impl<S: Scalar> RunObserver<S> for SilentObserver {}

fn weights_or_uniform(set: &SampleSet, num_classes: usize) -> Result<Vec<f64>> {
    if set.is_empty() {
        return Ok(vec![1.0; num_classes]);
    }
    match class_frequencies(set, num_classes) {
        Ok(freq) => class_weights(&freq),
        // a set whose labels are all ignore (e.g. zero-coverage
        // pseudolabels) contributes nothing to the CE anyway
        Err(Error::EmptySet(_)) => Ok(vec![1.0; num_classes]),
        Err(e) => Err(e),
    }
}

/// Restyles every source image in the batch toward the LAB statistics of an
/// unlabeled target image from the same batch (round-robin pairing).
pub fn apply_lab_styling(batch: &mut Batch) -> Result<()> {
    if batch.source.is_empty() || batch.target_unlabeled.is_empty() {
        return Ok(());
    }
    let partners: Vec<Vec<f32>> = batch
        .target_unlabeled
        .iter()
        .map(|it| it.image.clone())
        .collect();
    let size = batch.size;
    for (i, item) in batch.source.iter_mut().enumerate() {
        item.image = lab_style(&item.image, &partners[i % partners.len()], size)?;
    }
    Ok(())
}

/// Canonical location of round `k`'s checkpoint inside a run directory.
pub fn checkpoint_path(run_dir: &Path, k: usize) -> std::path::PathBuf {
    run_dir.join(format!("round{k}.ckpt"))
}

/// Trains round `k` from a fresh model and writes its checkpoint. Rounds
/// past 0 load the predecessor checkpoint, pseudolabel the unlabeled set
/// with it, and keep the pseudolabels in the labeled-target stream until
/// `n_drop`.
pub fn run_round<S: Scalar>(
    k: usize,
    sets: &TrainSets,
    plan: &SelfTrainPlan,
    cfg: &TrainerConfig,
    seed: u64,
    run_dir: &Path,
    obs: &mut dyn RunObserver<S>,
) -> Result<ModelPair<S>> {
    plan.validate()?;
    cfg.loss.validate()?;
    cfg.aug.validate()?;
    fs::create_dir_all(run_dir)?;

    let merged = if k == 0 {
        sets.target_labeled.clone()
    } else {
        let prev_path = checkpoint_path(run_dir, k - 1);
        if !prev_path.exists() {
            return Err(Error::State(format!(
                "round {k} needs the round {} checkpoint at {}",
                k - 1,
                prev_path.display()
            )));
        }
        let prev = load_checkpoint::<S>(&prev_path, &cfg.model)?;
        let pl =
            generate_pseudolabels(&prev.student, &cfg.model, &sets.target_unlabeled, plan.tau)?;
        write_pseudolabel_dir(&run_dir.join(format!("pl_round{k}")), &pl)?;
        merge_pseudolabels(
            &sets.target_labeled,
            &sets.target_unlabeled,
            &pl,
            prev.student.content_hash(),
        )?
    };

    let mut loss_cfg = cfg.loss.clone();
    let c = cfg.model.num_classes;
    if cfg.class_weights {
        loss_cfg.alpha_source = weights_or_uniform(&sets.source, c)?;
        loss_cfg.alpha_target = weights_or_uniform(&merged, c)?;
    } else {
        loss_cfg.alpha_source = vec![1.0; c];
        loss_cfg.alpha_target = vec![1.0; c];
    }
    // adaptation without target labels gets no contrastive anchors until
    // pseudolabels exist
    if cfg.setting == Setting::Uda && k == 0 {
        loss_cfg.lambda_2 = 0.0;
    }

    let mut pair = ModelPair::<S>::new(
        cfg.model.clone(),
        stream_seed(seed, &format!("round{k}/init")),
    )?;
    pair.mu_cap = cfg.mu_cap;

    // pseudolabels leave the stream at n_drop; round 0 has none to drop
    let n_drop_eff = if k == 0 || cfg.no_pl_drop {
        plan.n_steps
    } else {
        plan.n_drop
    };
    let mut sampler = BatchSampler::new(
        stream_seed(seed, &format!("round{k}/batches")),
        sets.source.len(),
        merged.len(),
        sets.target_unlabeled.len(),
    );
    let mut rng: ChaCha8Rng = derive_rng(seed, &format!("round{k}/loss"));
    let mut dropped = false;

    for step in 0..plan.n_steps {
        if !dropped && step >= n_drop_eff {
            sampler = BatchSampler::new(
                stream_seed(seed, &format!("round{k}/batches/dropped")),
                sets.source.len(),
                sets.target_labeled.len(),
                sets.target_unlabeled.len(),
            );
            dropped = true;
        }
        let labeled = if dropped {
            &sets.target_labeled
        } else {
            &merged
        };

        let mut counts = cfg.counts;
        if sets.source.is_empty() {
            counts.source = 0;
        }
        if labeled.is_empty() {
            counts.target_labeled = 0;
        }
        if sets.target_unlabeled.is_empty() {
            counts.unlabeled = 0;
        }
        let mut batch = sampler.next_batch(
            (!sets.source.is_empty()).then_some(&sets.source),
            (!labeled.is_empty()).then_some(labeled),
            (!sets.target_unlabeled.is_empty()).then_some(&sets.target_unlabeled),
            &counts,
        )?;
        if cfg.styling == Styling::Lab {
            apply_lab_styling(&mut batch)?;
        }

        let lr = if step >= plan.lr_drop_step() {
            cfg.lr * 0.1
        } else {
            cfg.lr
        };
        let (loss, parts) = total_loss(
            step,
            cfg.setting,
            &batch,
            &pair,
            &loss_cfg,
            &cfg.aug,
            cfg.batch_mix,
            &mut rng,
        )?;
        pair.student.zero_grads();
        loss.backward()?;
        let grad_norm = clip_grad_total_norm(&pair.student, cfg.clip_norm);
        sgd_nesterov_step(&mut pair.student, lr, cfg.momentum, cfg.weight_decay);
        let mu = pair.mu();
        pair.ema_update()?;

        obs.on_step(&StepMetrics {
            round: k,
            step,
            lr,
            total: parts.total,
            sup_source: parts.sup_source,
            sup_target: parts.sup_target,
            cr: parts.cr,
            pc: parts.pc,
            grad_norm,
            mu,
        });
    }

    save_checkpoint(&checkpoint_path(run_dir, k), &pair)?;
    Ok(pair)
}

/// Runs round 0 plus `plan.rounds` self-training rounds, skipping rounds
/// whose checkpoint already exists, and returns the students of the last
/// two checkpoints (twice the same model when `rounds` is 0).
pub fn run_algorithm<S: Scalar>(
    plan: &SelfTrainPlan,
    sets: &TrainSets,
    cfg: &TrainerConfig,
    seed: u64,
    run_dir: &Path,
    obs: &mut dyn RunObserver<S>,
) -> Result<(ParamSet<S>, ParamSet<S>)> {
    plan.validate()?;
    fs::create_dir_all(run_dir)?;
    for k in 0..=plan.rounds {
        if checkpoint_path(run_dir, k).exists() {
            continue;
        }
        let pair = run_round(k, sets, plan, cfg, seed, run_dir, obs)?;
        obs.on_round(k, &pair)?;
    }
    let last = plan.rounds;
    let a = load_checkpoint::<S>(
        &checkpoint_path(run_dir, last.saturating_sub(1)),
        &cfg.model,
    )?;
    let b = load_checkpoint::<S>(&checkpoint_path(run_dir, last), &cfg.model)?;
    Ok((a.student, b.student))
}

fn check_compatible<S: Scalar>(a: &ParamSet<S>, b: &ParamSet<S>) -> Result<()> {
    if a.len() != b.len() {
        return Err(Error::Integrity(format!(
            "ensemble members hold {} and {} tensors",
            a.len(),
            b.len()
        )));
    }
    for (name, t, _) in a.iter_all() {
        match b.try_get(name) {
            Some(u) if u.shape() == t.shape() => {}
            Some(u) => {
                return Err(Error::Integrity(format!(
                    "tensor {name}: shapes {:?} and {:?} differ between ensemble members",
                    t.shape(),
                    u.shape()
                )))
            }
            None => {
                return Err(Error::Integrity(format!(
                    "tensor {name} is missing from one ensemble member"
                )))
            }
        }
    }
    Ok(())
}

/// Element-wise mean of two probability maps of equal length.
pub fn mean_probs(a: &[f64], b: &[f64]) -> Result<Vec<f64>> {
    if a.len() != b.len() {
        return Err(Error::Integrity(format!(
            "probability maps of length {} and {} cannot be averaged",
            a.len(),
            b.len()
        )));
    }
    Ok(a.iter().zip(b).map(|(x, y)| 0.5 * (x + y)).collect())
}

fn single_probs<S: Scalar>(
    params: &ParamSet<S>,
    mcfg: &TinySegConfig,
    image: &[f32],
    size: usize,
) -> Result<Vec<f64>> {
    let x = batch_to_tensor::<S>(&[image], size)?;
    let logits = forward_seg(params, mcfg, &x, Mode::Eval)?;
    softmax_probs(&logits)
}

/// Test-time ensemble: argmax of the mean of the two models' softmax
/// outputs.
pub fn ensemble_predict<S: Scalar>(
    a: &ParamSet<S>,
    b: &ParamSet<S>,
    mcfg: &TinySegConfig,
    image: &[f32],
    size: usize,
) -> Result<Vec<u8>> {
    check_compatible(a, b)?;
    let pa = single_probs(a, mcfg, image, size)?;
    let pb = single_probs(b, mcfg, image, size)?;
    let mean = mean_probs(&pa, &pb)?;
    Ok(argmax_labels(&mean, 1, mcfg.num_classes, size * size))
}

/// Scores the two-model ensemble against a labeled set.
pub fn evaluate_ensemble<S: Scalar>(
    a: &ParamSet<S>,
    b: &ParamSet<S>,
    mcfg: &TinySegConfig,
    set: &SampleSet,
) -> Result<(ConfusionMatrix, IouReport)> {
    check_compatible(a, b)?;
    let mut cm = ConfusionMatrix::new(mcfg.num_classes);
    for item in &set.items {
        let gt = item
            .label
            .as_deref()
            .ok_or_else(|| Error::Config(format!("evaluation item {} has no labels", item.id)))?;
        let pred = ensemble_predict(a, b, mcfg, &item.image, item.size)?;
        cm.accumulate(&pred, gt)?;
    }
    let report = iou(&cm)?;
    Ok((cm, report))
}

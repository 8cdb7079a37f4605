//! Training objectives: frequency-weighted cross-entropy over the mixed
//! labeled batch, teacher→student consistency in one-hot and probability
//! flavors, supervised pixel contrast on unit-norm embeddings, and the
//! composite loss with its per-term breakdown.
//!
//! The cross-entropy and contrastive losses are implemented as fused graph
//! nodes: the forward pass computes softmax/log-sum-exp in `f64` regardless
//! of the scalar type, and the backward closure emits the closed-form
//! gradient directly. Teacher outputs never enter the autodiff graph — the
//! teacher's parameters are detached leaves, so its forward pass builds no
//! graph and pseudo-targets are plain buffers.

use rand_chacha::ChaCha8Rng;

use crate::augment::{strong_augment, AugConfig};
use crate::data::{Batch, BatchItem, IGNORE_LABEL};
use crate::error::{Error, Result};
use crate::model::{forward_parts, forward_seg, Mode, ModelPair, TinySegConfig};
use crate::scalar::Scalar;
use crate::tensor::{add, scale};
use crate::tensor::{ParamSet, Tensor};

/// Adaptation setting: which data streams carry supervision.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Setting {
    /// Source labels + a few target labels + unlabeled target.
    Ssda,
    /// Source labels only; target is unlabeled.
    Uda,
    /// No source at all; target labels + unlabeled target.
    Ssl,
}

impl Setting {
    pub fn parse(s: &str) -> Result<Setting> {
        match s {
            "ssda" => Ok(Setting::Ssda),
            "uda" => Ok(Setting::Uda),
            "ssl" => Ok(Setting::Ssl),
            other => Err(Error::Config(format!(
                "unknown setting {other:?} (expected ssda, uda or ssl)"
            ))),
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            Setting::Ssda => "ssda",
            Setting::Uda => "uda",
            Setting::Ssl => "ssl",
        }
    }
}

/// Consistency pseudo-target flavor.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CrMode {
    /// Argmax pseudo-labels (ties broken toward the lowest class index).
    OneHot,
    /// Full teacher softmax as a soft target.
    Prob,
}

impl Setting {
    /// Default consistency flavor: hard labels when some target supervision
    /// exists, soft targets for pure adaptation.
    pub fn default_cr_mode(&self) -> CrMode {
        match self {
            Setting::Uda => CrMode::Prob,
            _ => CrMode::OneHot,
        }
    }
}

/// Which images feed the pixel-contrast pool besides the labeled target
/// stream.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PcScope {
    /// Labeled target items only (their dense labels).
    Target,
    /// Also unlabeled items, labeled by the teacher's argmax at head
    /// resolution.
    TargetUnlabeled,
    /// Also source items (their dense labels).
    TargetSource,
}

impl PcScope {
    pub fn parse(s: &str) -> Result<PcScope> {
        match s {
            "target" => Ok(PcScope::Target),
            "target+unlabeled" => Ok(PcScope::TargetUnlabeled),
            "target+source" => Ok(PcScope::TargetSource),
            other => Err(Error::Config(format!(
                "unknown pc scope {other:?} (expected target, target+unlabeled or target+source)"
            ))),
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            PcScope::Target => "target",
            PcScope::TargetUnlabeled => "target+unlabeled",
            PcScope::TargetSource => "target+source",
        }
    }
}

/// Loss weights and hyperparameters.
#[derive(Debug, Clone, PartialEq)]
pub struct LossConfig {
    pub lambda_s: f64,
    pub lambda_t: f64,
    pub lambda_1: f64,
    pub lambda_2: f64,
    pub temperature: f64,
    pub n_pix: usize,
    pub alpha_source: Vec<f64>,
    pub alpha_target: Vec<f64>,
    pub pc_warmup_steps: u64,
    pub ignore_index: u8,
    /// Consistency flavor override; `None` follows the setting's default.
    pub cr_mode: Option<CrMode>,
    pub pc_scope: PcScope,
}

impl Default for LossConfig {
    fn default() -> Self {
        LossConfig {
            lambda_s: 1.0,
            lambda_t: 1.0,
            lambda_1: 1.0,
            lambda_2: 0.2,
            temperature: 0.1,
            n_pix: 50,
            alpha_source: Vec::new(),
            alpha_target: Vec::new(),
            pc_warmup_steps: 1000,
            ignore_index: IGNORE_LABEL,
            cr_mode: None,
            pc_scope: PcScope::Target,
        }
    }
}

impl LossConfig {
    /// Default config with uniform class weights for `c` classes.
    pub fn for_classes(c: usize) -> Self {
        LossConfig {
            alpha_source: vec![1.0; c],
            alpha_target: vec![1.0; c],
            ..LossConfig::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("lambda_s", self.lambda_s),
            ("lambda_t", self.lambda_t),
            ("lambda_1", self.lambda_1),
            ("lambda_2", self.lambda_2),
        ] {
            if v < 0.0 || !v.is_finite() {
                return Err(Error::Config(format!("{name} must be >= 0, got {v}")));
            }
        }
        if self.temperature <= 0.0 {
            return Err(Error::Config(format!(
                "temperature must be > 0, got {}",
                self.temperature
            )));
        }
        if self.n_pix < 2 {
            return Err(Error::Config(format!(
                "n_pix must be at least 2, got {}",
                self.n_pix
            )));
        }
        for (name, alpha) in [
            ("alpha_source", &self.alpha_source),
            ("alpha_target", &self.alpha_target),
        ] {
            if alpha.iter().any(|&a| a <= 0.0 || !a.is_finite()) {
                return Err(Error::Config(format!("{name} entries must be positive")));
            }
        }
        Ok(())
    }
}

/// Inverse-frequency class weights: α_c = sqrt(f_median / f_c) over present
/// classes; absent classes inherit the largest present weight so they can
/// still be supervised once pseudolabels introduce them.
pub fn class_weights(freq: &[f64]) -> Result<Vec<f64>> {
    let mut present: Vec<f64> = freq.iter().copied().filter(|&f| f > 0.0).collect();
    if present.is_empty() {
        return Err(Error::EmptySet(
            "class weights need at least one present class".into(),
        ));
    }
    present.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let median = if present.len() % 2 == 1 {
        present[present.len() / 2]
    } else {
        0.5 * (present[present.len() / 2 - 1] + present[present.len() / 2])
    };
    let mut alpha: Vec<f64> = freq
        .iter()
        .map(|&f| if f > 0.0 { (median / f).sqrt() } else { 0.0 })
        .collect();
    let max_present = alpha.iter().copied().fold(0.0, f64::max);
    for (a, &f) in alpha.iter_mut().zip(freq) {
        if f <= 0.0 {
            *a = max_present;
        }
    }
    Ok(alpha)
}

/// Dimensions of a `[B, C, H, W]` logits tensor.
fn logits_dims<S: Scalar>(logits: &Tensor<S>) -> Result<(usize, usize, usize)> {
    let shape = logits.shape();
    if shape.len() != 4 {
        return Err(Error::Argument(format!(
            "expected [B,C,H,W] logits, got {shape:?}"
        )));
    }
    Ok((shape[0], shape[1], shape[2] * shape[3]))
}

/// Per-pixel softmax of a logits tensor's values, computed in f64.
pub fn softmax_probs<S: Scalar>(logits: &Tensor<S>) -> Result<Vec<f64>> {
    let (b, c, hw) = logits_dims(logits)?;
    let data = logits.data();
    let mut probs = vec![0.0f64; b * c * hw];
    for bi in 0..b {
        for px in 0..hw {
            let base = bi * c * hw + px;
            let mut m = f64::NEG_INFINITY;
            for ci in 0..c {
                m = m.max(data[base + ci * hw].to_f64_lossy());
            }
            let mut z = 0.0;
            for ci in 0..c {
                let e = (data[base + ci * hw].to_f64_lossy() - m).exp();
                probs[base + ci * hw] = e;
                z += e;
            }
            for ci in 0..c {
                probs[base + ci * hw] /= z;
            }
        }
    }
    Ok(probs)
}

/// Class index with the highest probability per pixel; ties go to the
/// lowest index.
pub fn argmax_labels(probs: &[f64], b: usize, c: usize, hw: usize) -> Vec<u8> {
    let mut out = vec![0u8; b * hw];
    for bi in 0..b {
        for px in 0..hw {
            let base = bi * c * hw + px;
            let mut best = 0usize;
            for ci in 1..c {
                if probs[base + ci * hw] > probs[base + best * hw] {
                    best = ci;
                }
            }
            out[bi * hw + px] = best as u8;
        }
    }
    out
}

/// Frequency-weighted cross-entropy against integer labels, averaged over
/// non-ignored pixels. Softmax and the weighted NLL are fused into one graph
/// node with a closed-form backward.
pub fn weighted_ce<S: Scalar>(
    logits: &Tensor<S>,
    labels: &[u8],
    alpha: &[f64],
    ignore_index: u8,
) -> Result<Tensor<S>> {
    let (b, c, hw) = logits_dims(logits)?;
    if labels.len() != b * hw {
        return Err(Error::shape(
            "weighted_ce labels",
            &[labels.len()],
            &[b * hw],
        ));
    }
    if alpha.len() != c {
        return Err(Error::Argument(format!(
            "alpha has {} entries for {c} classes",
            alpha.len()
        )));
    }
    let mut probs = vec![0.0f64; b * c * hw];
    let mut total = 0.0f64;
    let mut n_valid = 0usize;
    {
        let data = logits.data();
        for bi in 0..b {
            for px in 0..hw {
                let l = labels[bi * hw + px];
                if l == ignore_index {
                    continue;
                }
                let li = l as usize;
                if li >= c {
                    return Err(Error::Data(format!(
                        "label {l} out of range for {c} classes"
                    )));
                }
                let base = bi * c * hw + px;
                let mut m = f64::NEG_INFINITY;
                for ci in 0..c {
                    m = m.max(data[base + ci * hw].to_f64_lossy());
                }
                let mut z = 0.0;
                for ci in 0..c {
                    let e = (data[base + ci * hw].to_f64_lossy() - m).exp();
                    probs[base + ci * hw] = e;
                    z += e;
                }
                for ci in 0..c {
                    probs[base + ci * hw] /= z;
                }
                total += alpha[li] * (m + z.ln() - data[base + li * hw].to_f64_lossy());
                n_valid += 1;
            }
        }
    }
    let n = n_valid.max(1) as f64;
    let labels = labels.to_vec();
    let alpha = alpha.to_vec();
    Ok(Tensor::from_op(
        vec![],
        vec![S::cast(total / n)],
        vec![logits.clone()],
        move |g| {
            let gs = g[0].to_f64_lossy() / n;
            let mut dx = vec![S::zero(); b * c * hw];
            for bi in 0..b {
                for px in 0..hw {
                    let l = labels[bi * hw + px];
                    if l == ignore_index {
                        continue;
                    }
                    let a = alpha[l as usize] * gs;
                    let base = bi * c * hw + px;
                    for ci in 0..c {
                        let delta = if ci == l as usize { 1.0 } else { 0.0 };
                        dx[base + ci * hw] = S::cast(a * (probs[base + ci * hw] - delta));
                    }
                }
            }
            vec![Some(dx)]
        },
    ))
}

/// Cross-entropy against dense probability targets (rows summing to 1),
/// averaged over all pixels. Reduces to [`weighted_ce`] with unit weights
/// when the targets are one-hot.
pub fn soft_ce<S: Scalar>(logits: &Tensor<S>, targets: &[f64]) -> Result<Tensor<S>> {
    let (b, c, hw) = logits_dims(logits)?;
    if targets.len() != b * c * hw {
        return Err(Error::shape(
            "soft_ce targets",
            &[targets.len()],
            &[b * c * hw],
        ));
    }
    let probs = softmax_probs(logits)?;
    let mut total = 0.0f64;
    {
        let data = logits.data();
        for bi in 0..b {
            for px in 0..hw {
                let base = bi * c * hw + px;
                let mut m = f64::NEG_INFINITY;
                for ci in 0..c {
                    m = m.max(data[base + ci * hw].to_f64_lossy());
                }
                let mut z = 0.0;
                for ci in 0..c {
                    z += (data[base + ci * hw].to_f64_lossy() - m).exp();
                }
                let log_z = m + z.ln();
                for ci in 0..c {
                    let q = targets[base + ci * hw];
                    if q != 0.0 {
                        total += q * (log_z - data[base + ci * hw].to_f64_lossy());
                    }
                }
            }
        }
    }
    let n = (b * hw).max(1) as f64;
    let targets = targets.to_vec();
    Ok(Tensor::from_op(
        vec![],
        vec![S::cast(total / n)],
        vec![logits.clone()],
        move |g| {
            let gs = g[0].to_f64_lossy() / n;
            let mut dx = vec![S::zero(); b * c * hw];
            for bi in 0..b {
                for px in 0..hw {
                    let base = bi * c * hw + px;
                    let mut qsum = 0.0;
                    for ci in 0..c {
                        qsum += targets[base + ci * hw];
                    }
                    for ci in 0..c {
                        let p = probs[base + ci * hw];
                        let q = targets[base + ci * hw];
                        dx[base + ci * hw] = S::cast(gs * (p * qsum - q));
                    }
                }
            }
            vec![Some(dx)]
        },
    ))
}

/// Stacks images into a detached `[B, 3, H, W]` input tensor.
pub fn batch_to_tensor<S: Scalar>(images: &[&[f32]], size: usize) -> Result<Tensor<S>> {
    let n = 3 * size * size;
    let mut data = Vec::with_capacity(images.len() * n);
    for img in images {
        if img.len() != n {
            return Err(Error::shape("batch image", &[img.len()], &[n]));
        }
        data.extend(img.iter().map(|&v| S::cast(v as f64)));
    }
    Ok(Tensor::leaf(&[images.len(), 3, size, size], data))
}

fn require_labels<'a>(items: &'a [BatchItem], role: &str) -> Result<Vec<&'a [u8]>> {
    items
        .iter()
        .map(|it| {
            it.label
                .as_deref()
                .ok_or_else(|| Error::Config(format!("{role} item {} has no labels", it.id)))
        })
        .collect()
}

/// Supervised loss λ_s·Q_s + λ_t·Q_t, returned with the two weighted term
/// values for logging. With `batch_mix` both labeled sets share one forward
/// pass (and thus normalization statistics); pixels of the other domain are
/// masked out of each term through the ignore index.
pub fn sup_loss<S: Scalar>(
    student: &ParamSet<S>,
    mcfg: &TinySegConfig,
    batch: &Batch,
    cfg: &LossConfig,
    batch_mix: bool,
) -> Result<(Tensor<S>, f64, f64)> {
    let have_s = !batch.source.is_empty();
    let have_t = !batch.target_labeled.is_empty();
    if !have_s && !have_t {
        return Err(Error::Config(
            "supervised loss needs source or target-labeled items".into(),
        ));
    }
    let c = mcfg.num_classes;
    for (name, alpha, used) in [
        (
            "alpha_source",
            &cfg.alpha_source,
            have_s && cfg.lambda_s > 0.0,
        ),
        (
            "alpha_target",
            &cfg.alpha_target,
            have_t && cfg.lambda_t > 0.0,
        ),
    ] {
        if used && alpha.len() != c {
            return Err(Error::Config(format!(
                "{name} has {} entries for {c} classes",
                alpha.len()
            )));
        }
    }
    let size = batch.size;
    let hw = size * size;
    let s_labels = require_labels(&batch.source, "source")?;
    let t_labels = require_labels(&batch.target_labeled, "target-labeled")?;

    if batch_mix && have_s && have_t {
        let images: Vec<&[f32]> = batch
            .source
            .iter()
            .chain(&batch.target_labeled)
            .map(|it| it.image.as_slice())
            .collect();
        let x = batch_to_tensor::<S>(&images, size)?;
        let logits = forward_seg(student, mcfg, &x, Mode::Train)?;
        let n_s = batch.source.len();
        let n_all = images.len();
        // each term sees only its own domain's pixels via the ignore mask
        let mask_for = |keep: std::ops::Range<usize>, labels: &[&[u8]]| {
            let mut out = vec![cfg.ignore_index; n_all * hw];
            for (i, l) in keep.clone().zip(labels) {
                out[i * hw..(i + 1) * hw].copy_from_slice(l);
            }
            out
        };
        let mut total = Tensor::scalar(S::zero());
        let mut sup_s = 0.0;
        let mut sup_t = 0.0;
        if cfg.lambda_s > 0.0 {
            let labels = mask_for(0..n_s, &s_labels);
            let q_s = weighted_ce(&logits, &labels, &cfg.alpha_source, cfg.ignore_index)?;
            let w = scale(&q_s, S::cast(cfg.lambda_s));
            sup_s = w.item().to_f64_lossy();
            total = add(&total, &w)?;
        }
        if cfg.lambda_t > 0.0 {
            let labels = mask_for(n_s..n_all, &t_labels);
            let q_t = weighted_ce(&logits, &labels, &cfg.alpha_target, cfg.ignore_index)?;
            let w = scale(&q_t, S::cast(cfg.lambda_t));
            sup_t = w.item().to_f64_lossy();
            total = add(&total, &w)?;
        }
        return Ok((total, sup_s, sup_t));
    }

    // separate forwards: the no-batch-mix ablation, or only one set present
    let mut total = Tensor::scalar(S::zero());
    let mut values = [0.0f64; 2];
    for (i, (items, labels, alpha, lambda)) in [
        (&batch.source, &s_labels, &cfg.alpha_source, cfg.lambda_s),
        (
            &batch.target_labeled,
            &t_labels,
            &cfg.alpha_target,
            cfg.lambda_t,
        ),
    ]
    .into_iter()
    .enumerate()
    {
        if items.is_empty() || lambda == 0.0 {
            continue;
        }
        let images: Vec<&[f32]> = items.iter().map(|it| it.image.as_slice()).collect();
        let x = batch_to_tensor::<S>(&images, size)?;
        let logits = forward_seg(student, mcfg, &x, Mode::Train)?;
        let flat: Vec<u8> = labels.iter().flat_map(|l| l.iter().copied()).collect();
        let q = weighted_ce(&logits, &flat, alpha, cfg.ignore_index)?;
        let w = scale(&q, S::cast(lambda));
        values[i] = w.item().to_f64_lossy();
        total = add(&total, &w)?;
    }
    Ok((total, values[0], values[1]))
}

/// Shared consistency core: teacher predicts on the weak view, the student
/// is trained on the strong view against the teacher's (CutMix-mixed)
/// pseudo-targets. Returns the unweighted loss.
fn cr_loss<S: Scalar>(
    student: &ParamSet<S>,
    teacher: &ParamSet<S>,
    mcfg: &TinySegConfig,
    items: &[BatchItem],
    size: usize,
    aug: &AugConfig,
    mode: CrMode,
    rng: &mut ChaCha8Rng,
) -> Result<Tensor<S>> {
    if items.is_empty() {
        return Err(Error::EmptySet(
            "consistency loss needs unlabeled items".into(),
        ));
    }
    let b = items.len();
    let hw = size * size;
    let c = mcfg.num_classes;
    let weak_images: Vec<&[f32]> = items.iter().map(|it| it.image.as_slice()).collect();
    let weak = batch_to_tensor::<S>(&weak_images, size)?;
    // the teacher is a detached parameter set, so this builds no graph
    let t_logits = forward_seg(teacher, mcfg, &weak, Mode::TrainNoUpdate)?;
    let t_probs = softmax_probs(&t_logits)?;
    let t_hard = argmax_labels(&t_probs, b, c, hw);

    let mut strong_views: Vec<Vec<f32>> = Vec::with_capacity(b);
    let mut masks: Vec<Vec<bool>> = Vec::with_capacity(b);
    for i in 0..b {
        let partner = (i + 1) % b;
        let (view, mask) = strong_augment(&items[i].image, &items[partner].image, size, aug, rng)?;
        strong_views.push(view);
        masks.push(mask);
    }
    let strong_refs: Vec<&[f32]> = strong_views.iter().map(|v| v.as_slice()).collect();
    let strong = batch_to_tensor::<S>(&strong_refs, size)?;
    let s_logits = forward_seg(student, mcfg, &strong, Mode::Train)?;

    // pseudo-targets follow the pixels: inside the CutMix mask the partner's
    // teacher prediction substitutes for the original one
    match mode {
        CrMode::OneHot => {
            let mut targets = vec![0u8; b * hw];
            for i in 0..b {
                let partner = (i + 1) % b;
                for px in 0..hw {
                    let from = if masks[i][px] { partner } else { i };
                    targets[i * hw + px] = t_hard[from * hw + px];
                }
            }
            weighted_ce(&s_logits, &targets, &vec![1.0; c], IGNORE_LABEL)
        }
        CrMode::Prob => {
            let mut targets = vec![0.0f64; b * c * hw];
            for i in 0..b {
                let partner = (i + 1) % b;
                for px in 0..hw {
                    let from = if masks[i][px] { partner } else { i };
                    for ci in 0..c {
                        targets[(i * c + ci) * hw + px] = t_probs[(from * c + ci) * hw + px];
                    }
                }
            }
            soft_ce(&s_logits, &targets)
        }
    }
}

/// One-hot consistency: student CE against teacher argmax pseudo-labels.
pub fn cr_onehot<S: Scalar>(
    models: &ModelPair<S>,
    items: &[BatchItem],
    size: usize,
    aug: &AugConfig,
    rng: &mut ChaCha8Rng,
) -> Result<Tensor<S>> {
    cr_loss(
        &models.student,
        &models.teacher,
        &models.config,
        items,
        size,
        aug,
        CrMode::OneHot,
        rng,
    )
}

/// Probability consistency: student CE against the full teacher softmax.
pub fn cr_prob<S: Scalar>(
    models: &ModelPair<S>,
    items: &[BatchItem],
    size: usize,
    aug: &AugConfig,
    rng: &mut ChaCha8Rng,
) -> Result<Tensor<S>> {
    cr_loss(
        &models.student,
        &models.teacher,
        &models.config,
        items,
        size,
        aug,
        CrMode::Prob,
        rng,
    )
}

/// Pixels chosen for the contrastive loss: flat indices into `B·h·w`
/// positions plus their class. Positives and negatives are induced by label
/// equality within this pool.
#[derive(Debug, Clone)]
pub struct ContrastSample {
    pub pixels: Vec<(usize, u8)>,
}

/// Nearest-neighbor label downsampling by an integer factor (block-center
/// rule), for moving full-resolution labels to the embedding grid.
pub fn downsample_labels(label: &[u8], size: usize, factor: usize) -> Vec<u8> {
    let out_size = size / factor;
    let mut out = vec![0u8; out_size * out_size];
    for y in 0..out_size {
        for x in 0..out_size {
            let sy = (y * factor + factor / 2).min(size - 1);
            let sx = (x * factor + factor / 2).min(size - 1);
            out[y * out_size + x] = label[sy * size + sx];
        }
    }
    out
}

/// Selects up to `n_pix` pixels per class: the hardest half (lowest
/// predicted probability for the pixel's own class) plus a uniform draw from
/// the rest. `true_class_prob[p]` is the predicted probability of pixel
/// `p`'s labeled class.
pub fn sample_contrast(
    labels_e: &[u8],
    true_class_prob: &[f64],
    num_classes: usize,
    cfg: &LossConfig,
    rng: &mut ChaCha8Rng,
) -> ContrastSample {
    let mut pixels = Vec::new();
    for c in 0..num_classes as u8 {
        let mut cand: Vec<usize> = (0..labels_e.len())
            .filter(|&p| labels_e[p] == c && labels_e[p] != cfg.ignore_index)
            .collect();
        if cand.is_empty() {
            continue;
        }
        // ascending by difficulty (hardest first), index as tiebreak
        cand.sort_by(|&a, &b| {
            true_class_prob[a]
                .partial_cmp(&true_class_prob[b])
                .unwrap()
                .then(a.cmp(&b))
        });
        let n_take = cfg.n_pix.min(cand.len());
        let n_hard = cfg.n_pix.div_ceil(2).min(n_take);
        for &p in &cand[..n_hard] {
            pixels.push((p, c));
        }
        let rest = &cand[n_hard..];
        let n_rand = n_take - n_hard;
        if n_rand > 0 {
            let mut chosen = rand::seq::index::sample(rng, rest.len(), n_rand).into_vec();
            chosen.sort_unstable();
            for i in chosen {
                pixels.push((rest[i], c));
            }
        }
    }
    ContrastSample { pixels }
}

/// Supervised pixel-contrastive loss over sampled embeddings.
///
/// For each anchor with at least one same-class peer, every positive
/// contributes −log( e^{z·z⁺/t} / (e^{z·z⁺/t} + Σ e^{z·z⁻/t}) ); the loss is
/// the anchor-mean of positive-means. Log-sum-exp is stabilized and the
/// gradient w.r.t. the embedding tensor is emitted in closed form.
pub fn pixel_contrast_loss<S: Scalar>(
    embeddings: &Tensor<S>,
    sample: &ContrastSample,
    temperature: f64,
) -> Result<Tensor<S>> {
    if temperature <= 0.0 {
        return Err(Error::Config(format!(
            "contrast temperature must be > 0, got {temperature}"
        )));
    }
    let shape = embeddings.shape();
    if shape.len() != 4 {
        return Err(Error::Argument(format!(
            "expected [B,D,h,w] embeddings, got {shape:?}"
        )));
    }
    let (bsz, d, hw) = (shape[0], shape[1], shape[2] * shape[3]);
    let n = sample.pixels.len();
    let pixels = sample.pixels.clone();
    for &(p, _) in &pixels {
        if p >= bsz * hw {
            return Err(Error::Argument(format!(
                "contrast pixel {p} outside {} embedding positions",
                bsz * hw
            )));
        }
    }
    // gather anchor vectors as f64
    let z: Vec<Vec<f64>> = {
        let data = embeddings.data();
        pixels
            .iter()
            .map(|&(p, _)| {
                let (b, r) = (p / hw, p % hw);
                (0..d)
                    .map(|di| data[(b * d + di) * hw + r].to_f64_lossy())
                    .collect()
            })
            .collect()
    };
    let dot = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(x, y)| x * y).sum::<f64>();

    // forward: per-anchor positive/negative index lists and the loss
    let mut pos: Vec<Vec<usize>> = vec![Vec::new(); n];
    let mut neg: Vec<Vec<usize>> = vec![Vec::new(); n];
    for j in 0..n {
        for k in 0..n {
            if k == j {
                continue;
            }
            if pixels[k].1 == pixels[j].1 {
                pos[j].push(k);
            } else {
                neg[j].push(k);
            }
        }
    }
    let anchors: Vec<usize> = (0..n).filter(|&j| !pos[j].is_empty()).collect();
    let a_count = anchors.len().max(1) as f64;
    // The negative partition function is shared by every positive of an
    // anchor: fold it once as exp(lse_neg) re-shifted per positive.
    let mut total = 0.0f64;
    for &j in &anchors {
        let negs: Vec<f64> = neg[j]
            .iter()
            .map(|&k| dot(&z[j], &z[k]) / temperature)
            .collect();
        let m_neg = negs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let sum_neg: f64 = negs.iter().map(|&s| (s - m_neg).exp()).sum();
        let mut anchor_term = 0.0;
        for &p in &pos[j] {
            let sp = dot(&z[j], &z[p]) / temperature;
            let m = sp.max(m_neg);
            let neg_part = if negs.is_empty() {
                0.0
            } else {
                (m_neg - m).exp() * sum_neg
            };
            let zsum = (sp - m).exp() + neg_part;
            anchor_term += m + zsum.ln() - sp;
        }
        total += anchor_term / pos[j].len() as f64;
    }
    let loss = total / a_count;

    Ok(Tensor::from_op(
        vec![],
        vec![S::cast(loss)],
        vec![embeddings.clone()],
        move |g| {
            let gs = g[0].to_f64_lossy() / a_count;
            let mut dz = vec![vec![0.0f64; d]; n];
            let axpy = |acc: &mut Vec<f64>, k: f64, v: &[f64]| {
                for (a, x) in acc.iter_mut().zip(v) {
                    *a += k * x;
                }
            };
            for &j in &anchors {
                let coef = gs / pos[j].len() as f64;
                let negs: Vec<f64> = neg[j]
                    .iter()
                    .map(|&k| dot(&z[j], &z[k]) / temperature)
                    .collect();
                let m_neg = negs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                let ens: Vec<f64> = negs.iter().map(|&s| (s - m_neg).exp()).collect();
                let sum_neg: f64 = ens.iter().sum();
                // d(term)/d(sim): softmax weights, minus 1 on the positive.
                // Each negative's weight factors as exp(s_k - m_neg) times a
                // per-anchor sum over positives, so negatives get one axpy
                // for the whole anchor instead of one per positive.
                let mut q = 0.0f64;
                for &p in &pos[j] {
                    let sp = dot(&z[j], &z[p]) / temperature;
                    let m = sp.max(m_neg);
                    let shift = (m_neg - m).exp();
                    let ep = (sp - m).exp();
                    let zsum = ep
                        + if negs.is_empty() {
                            0.0
                        } else {
                            shift * sum_neg
                        };
                    let wp = (ep / zsum - 1.0) * coef / temperature;
                    axpy(&mut dz[j], wp, &z[p]);
                    axpy(&mut dz[p], wp, &z[j]);
                    q += shift / zsum;
                }
                for (ni, &k) in neg[j].iter().enumerate() {
                    let wn = ens[ni] * q * coef / temperature;
                    axpy(&mut dz[j], wn, &z[k]);
                    axpy(&mut dz[k], wn, &z[j]);
                }
            }
            let mut dx = vec![S::zero(); bsz * d * hw];
            for (i, &(p, _)) in pixels.iter().enumerate() {
                let (b, r) = (p / hw, p % hw);
                for di in 0..d {
                    let slot = &mut dx[(b * d + di) * hw + r];
                    *slot = *slot + S::cast(dz[i][di]);
                }
            }
            vec![Some(dx)]
        },
    ))
}

/// Weighted per-term contributions; they sum to `total`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossBreakdown {
    pub total: f64,
    pub sup_source: f64,
    pub sup_target: f64,
    pub cr: f64,
    pub pc: f64,
}

/// The composite training objective for one batch: supervised CE plus
/// λ_1-weighted consistency plus λ_2-weighted pixel contrast (gated by the
/// warm-up step count). The consistency flavor follows the setting.
#[allow(clippy::too_many_arguments)]
pub fn total_loss<S: Scalar>(
    step: u64,
    setting: Setting,
    batch: &Batch,
    models: &ModelPair<S>,
    cfg: &LossConfig,
    aug: &AugConfig,
    batch_mix: bool,
    rng: &mut ChaCha8Rng,
) -> Result<(Tensor<S>, LossBreakdown)> {
    let have_s = !batch.source.is_empty();
    let have_t = !batch.target_labeled.is_empty();
    match setting {
        Setting::Ssda => {
            if !have_s || !have_t {
                return Err(Error::Config(
                    "ssda needs source and target-labeled items in every batch".into(),
                ));
            }
        }
        Setting::Uda => {
            if !have_s {
                return Err(Error::Config(
                    "uda needs source items in every batch".into(),
                ));
            }
        }
        Setting::Ssl => {
            if have_s {
                return Err(Error::Config("ssl must not receive source items".into()));
            }
            if !have_t {
                return Err(Error::Config(
                    "ssl needs target-labeled items in every batch".into(),
                ));
            }
        }
    }

    let (sup, sup_s, sup_t) = sup_loss(&models.student, &models.config, batch, cfg, batch_mix)?;
    let mut total = sup;

    let mut cr_v = 0.0;
    if cfg.lambda_1 > 0.0 {
        if batch.target_unlabeled.is_empty() {
            return Err(Error::Config(
                "consistency weight is positive but the batch has no unlabeled items".into(),
            ));
        }
        let cr = cr_loss(
            &models.student,
            &models.teacher,
            &models.config,
            &batch.target_unlabeled,
            batch.size,
            aug,
            cfg.cr_mode.unwrap_or_else(|| setting.default_cr_mode()),
            rng,
        )?;
        let weighted = scale(&cr, S::cast(cfg.lambda_1));
        cr_v = weighted.item().to_f64_lossy();
        total = add(&total, &weighted)?;
    }

    let mut pc_v = 0.0;
    let pc_due = cfg.lambda_2 > 0.0 && step >= cfg.pc_warmup_steps;
    // anchors: labeled target items, plus the scope's extras; dense labels
    // where available, teacher argmax otherwise
    let mut pc_items: Vec<(&[f32], Option<&[u8]>)> = Vec::new();
    if pc_due {
        for it in &batch.target_labeled {
            let l = it.label.as_deref().ok_or_else(|| {
                Error::Config(format!("target-labeled item {} has no labels", it.id))
            })?;
            pc_items.push((&it.image, Some(l)));
        }
        match cfg.pc_scope {
            PcScope::Target => {}
            PcScope::TargetUnlabeled => {
                for it in &batch.target_unlabeled {
                    pc_items.push((&it.image, None));
                }
            }
            PcScope::TargetSource => {
                for it in &batch.source {
                    let l = it.label.as_deref().ok_or_else(|| {
                        Error::Config(format!("source item {} has no labels", it.id))
                    })?;
                    pc_items.push((&it.image, Some(l)));
                }
            }
        }
    }
    if pc_due && !pc_items.is_empty() {
        let images: Vec<&[f32]> = pc_items.iter().map(|(img, _)| *img).collect();
        let x = batch_to_tensor::<S>(&images, batch.size)?;
        let parts = forward_parts(
            &models.student,
            &models.config,
            &x,
            Mode::TrainNoUpdate,
            true,
        )?;
        let emb = parts.embeddings.expect("projection requested");
        let head = parts.head_logits;
        let hshape = head.shape().to_vec();
        let (hb, hc, hhw) = (hshape[0], hshape[1], hshape[2] * hshape[3]);
        let factor = batch.size / hshape[2];

        // teacher pseudo-labels at head resolution for the label-less items
        let unl: Vec<usize> = pc_items
            .iter()
            .enumerate()
            .filter(|(_, (_, l))| l.is_none())
            .map(|(i, _)| i)
            .collect();
        let mut teacher_labels = Vec::new();
        if !unl.is_empty() {
            let t_images: Vec<&[f32]> = unl.iter().map(|&i| images[i]).collect();
            let tx = batch_to_tensor::<S>(&t_images, batch.size)?;
            let t_parts = forward_parts(
                &models.teacher,
                &models.config,
                &tx,
                Mode::TrainNoUpdate,
                false,
            )?;
            let t_probs = softmax_probs(&t_parts.head_logits)?;
            teacher_labels = argmax_labels(&t_probs, unl.len(), hc, hhw);
        }

        let mut labels_e = Vec::with_capacity(hb * hhw);
        let mut next_teacher = 0usize;
        for (_, label) in &pc_items {
            match label {
                Some(l) => labels_e.extend(downsample_labels(l, batch.size, factor)),
                None => {
                    labels_e.extend(&teacher_labels[next_teacher * hhw..(next_teacher + 1) * hhw]);
                    next_teacher += 1;
                }
            }
        }
        let head_probs = softmax_probs(&head)?;
        let true_prob: Vec<f64> = (0..hb * hhw)
            .map(|p| {
                let l = labels_e[p];
                if l == cfg.ignore_index || l as usize >= hc {
                    return 1.0; // never sampled; sample_contrast skips ignore
                }
                let (b, r) = (p / hhw, p % hhw);
                head_probs[(b * hc + l as usize) * hhw + r]
            })
            .collect();
        let sample = sample_contrast(&labels_e, &true_prob, hc, cfg, rng);
        let pc = pixel_contrast_loss(&emb, &sample, cfg.temperature)?;
        let weighted = scale(&pc, S::cast(cfg.lambda_2));
        pc_v = weighted.item().to_f64_lossy();
        total = add(&total, &weighted)?;
    }

    let total_v = total.item().to_f64_lossy();
    Ok((
        total,
        LossBreakdown {
            total: total_v,
            sup_source: sup_s,
            sup_target: sup_t,
            cr: cr_v,
            pc: pc_v,
        },
    ))
}

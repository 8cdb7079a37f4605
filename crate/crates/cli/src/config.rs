//! Flat `key = value` run configuration: one struct holding every tunable,
//! a parser for config files and overrides, and a writer that materializes
//! all defaults so a run can be reproduced from its artifacts alone.

use std::fs;
use std::path::Path;

use ssda_core::data::{BatchCounts, DatasetMeta, GapParams};
use ssda_core::losses::{CrMode, LossConfig, PcScope, Setting};
use ssda_core::model::TinySegConfig;
use ssda_core::selftrain::{SelfTrainPlan, Styling, TrainerConfig};
use ssda_core::augment::AugConfig;
use ssda_core::{Error, Result};

/// Every knob of a run. Defaults are the published training configuration
/// scaled to the desk-size benchmark (32×32 synthetic scenes, 2000-step
/// rounds).
#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub setting: Setting,
    pub seed: u64,
    pub run_dir: String,
    /// Dataset directory; empty means generate the dataset in memory.
    pub data_dir: String,

    // dataset generation
    pub n_source: usize,
    pub n_target_pool: usize,
    pub n_val: usize,
    pub image_size: usize,
    pub num_classes: usize,
    pub gap_color_shift: f64,
    pub gap_gamma: f64,
    pub gap_noise: f64,
    pub gap_class_skew: f64,
    /// Number of labeled target images (the rest of the pool is unlabeled).
    pub n_t: usize,

    // architecture
    pub in_channels: usize,
    pub base_width: usize,
    pub embed_dim: usize,
    pub dilations: Vec<usize>,
    pub downsample: usize,

    // self-training schedule
    pub rounds: usize,
    pub n_steps: u64,
    pub n_drop: u64,
    pub tau: f64,

    // optimizer
    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub clip_norm: f64,
    pub mu_cap: f64,
    pub batch_source: usize,
    pub batch_target: usize,
    pub batch_unlabeled: usize,

    // loss
    pub lambda_s: f64,
    pub lambda_t: f64,
    pub lambda_1: f64,
    pub lambda_2: f64,
    pub temperature: f64,
    pub n_pix: usize,
    pub pc_warmup_steps: u64,

    // strong augmentation
    pub p_jitter: f64,
    pub p_blur: f64,
    pub p_randaug: f64,
    pub p_cutmix: f64,
    pub jitter_brightness: f64,
    pub jitter_contrast: f64,
    pub jitter_saturation: f64,
    pub jitter_hue: f64,
    pub blur_sigma_lo: f64,
    pub blur_sigma_hi: f64,
    pub cutmix_area_lo: f64,
    pub cutmix_area_hi: f64,
    pub enhance_lo: f64,
    pub enhance_hi: f64,
    pub posterize_bits_lo: u32,
    pub posterize_bits_hi: u32,
    pub solarize_lo: f64,
    pub solarize_hi: f64,

    // ablation switches
    pub disable_cr: bool,
    pub disable_pc: bool,
    pub disable_class_weights: bool,
    pub disable_batch_mix: bool,
    /// `None` follows the setting's default consistency flavor.
    pub cr_variant: Option<CrMode>,
    pub styling: Styling,
    pub pc_scope: PcScope,
    pub no_pl_drop: bool,
}

impl Default for RunConfig {
    fn default() -> Self {
        let aug = AugConfig::default();
        RunConfig {
            setting: Setting::Ssda,
            seed: 0,
            run_dir: "runs/default".into(),
            data_dir: String::new(),

            n_source: 400,
            n_target_pool: 400,
            n_val: 100,
            image_size: 32,
            num_classes: 5,
            gap_color_shift: 0.6,
            gap_gamma: 0.6,
            gap_noise: 0.04,
            gap_class_skew: 0.8,
            n_t: 8,

            in_channels: 3,
            base_width: 16,
            embed_dim: 32,
            dilations: vec![1, 2, 4],
            downsample: 2,

            rounds: 2,
            n_steps: 2000,
            n_drop: 1000,
            tau: 0.9,

            lr: 1e-3,
            momentum: 0.9,
            weight_decay: 5e-4,
            clip_norm: 10.0,
            mu_cap: 0.995,
            batch_source: 2,
            batch_target: 2,
            batch_unlabeled: 2,

            lambda_s: 1.0,
            lambda_t: 1.0,
            lambda_1: 1.0,
            lambda_2: 0.2,
            temperature: 0.1,
            n_pix: 50,
            pc_warmup_steps: 1000,

            p_jitter: aug.p_jitter,
            p_blur: aug.p_blur,
            p_randaug: aug.p_randaug,
            p_cutmix: aug.p_cutmix,
            jitter_brightness: aug.jitter_brightness,
            jitter_contrast: aug.jitter_contrast,
            jitter_saturation: aug.jitter_saturation,
            jitter_hue: aug.jitter_hue,
            blur_sigma_lo: aug.blur_sigma.0,
            blur_sigma_hi: aug.blur_sigma.1,
            cutmix_area_lo: aug.cutmix_area.0,
            cutmix_area_hi: aug.cutmix_area.1,
            enhance_lo: aug.enhance_range.0,
            enhance_hi: aug.enhance_range.1,
            posterize_bits_lo: aug.posterize_bits.0,
            posterize_bits_hi: aug.posterize_bits.1,
            solarize_lo: aug.solarize_range.0,
            solarize_hi: aug.solarize_range.1,

            disable_cr: false,
            disable_pc: false,
            disable_class_weights: false,
            disable_batch_mix: false,
            cr_variant: None,
            styling: Styling::None,
            pc_scope: PcScope::Target,
            no_pl_drop: false,
        }
    }
}

/// Stable emission order for `config.txt`; every settable key appears here.
pub const KEY_ORDER: &[&str] = &[
    "setting",
    "seed",
    "run_dir",
    "data_dir",
    "n_source",
    "n_target_pool",
    "n_val",
    "image_size",
    "num_classes",
    "gap_color_shift",
    "gap_gamma",
    "gap_noise",
    "gap_class_skew",
    "n_t",
    "in_channels",
    "base_width",
    "embed_dim",
    "dilations",
    "downsample",
    "rounds",
    "n_steps",
    "n_drop",
    "tau",
    "lr",
    "momentum",
    "weight_decay",
    "clip_norm",
    "mu_cap",
    "batch_source",
    "batch_target",
    "batch_unlabeled",
    "lambda_s",
    "lambda_t",
    "lambda_1",
    "lambda_2",
    "temperature",
    "n_pix",
    "pc_warmup_steps",
    "p_jitter",
    "p_blur",
    "p_randaug",
    "p_cutmix",
    "jitter_brightness",
    "jitter_contrast",
    "jitter_saturation",
    "jitter_hue",
    "blur_sigma_lo",
    "blur_sigma_hi",
    "cutmix_area_lo",
    "cutmix_area_hi",
    "enhance_lo",
    "enhance_hi",
    "posterize_bits_lo",
    "posterize_bits_hi",
    "solarize_lo",
    "solarize_hi",
    "disable_cr",
    "disable_pc",
    "disable_class_weights",
    "disable_batch_mix",
    "cr_variant",
    "styling",
    "pc_scope",
    "no_pl_drop",
];

fn num<T: std::str::FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .parse()
        .map_err(|_| Error::Config(format!("{key} expects a number, got {value:?}")))
}

fn boolean(key: &str, value: &str) -> Result<bool> {
    match value {
        "true" => Ok(true),
        "false" => Ok(false),
        other => Err(Error::Config(format!(
            "{key} expects true or false, got {other:?}"
        ))),
    }
}

impl RunConfig {
    /// Sets one key from its text form; unknown keys and malformed values
    /// are configuration errors.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        match key {
            "setting" => self.setting = Setting::parse(value)?,
            "seed" => self.seed = num(key, value)?,
            "run_dir" => self.run_dir = value.to_string(),
            "data_dir" => self.data_dir = value.to_string(),
            "n_source" => self.n_source = num(key, value)?,
            "n_target_pool" => self.n_target_pool = num(key, value)?,
            "n_val" => self.n_val = num(key, value)?,
            "image_size" => self.image_size = num(key, value)?,
            "num_classes" => self.num_classes = num(key, value)?,
            "gap_color_shift" => self.gap_color_shift = num(key, value)?,
            "gap_gamma" => self.gap_gamma = num(key, value)?,
            "gap_noise" => self.gap_noise = num(key, value)?,
            "gap_class_skew" => self.gap_class_skew = num(key, value)?,
            "n_t" => self.n_t = num(key, value)?,
            "in_channels" => self.in_channels = num(key, value)?,
            "base_width" => self.base_width = num(key, value)?,
            "embed_dim" => self.embed_dim = num(key, value)?,
            "dilations" => {
                let parsed: Result<Vec<usize>> = value
                    .split(',')
                    .map(|p| num("dilations", p.trim()))
                    .collect();
                let parsed = parsed?;
                if parsed.is_empty() {
                    return Err(Error::Config("dilations must not be empty".into()));
                }
                self.dilations = parsed;
            }
            "downsample" => self.downsample = num(key, value)?,
            "rounds" => self.rounds = num(key, value)?,
            "n_steps" => self.n_steps = num(key, value)?,
            "n_drop" => self.n_drop = num(key, value)?,
            "tau" => self.tau = num(key, value)?,
            "lr" => self.lr = num(key, value)?,
            "momentum" => self.momentum = num(key, value)?,
            "weight_decay" => self.weight_decay = num(key, value)?,
            "clip_norm" => self.clip_norm = num(key, value)?,
            "mu_cap" => self.mu_cap = num(key, value)?,
            "batch_source" => self.batch_source = num(key, value)?,
            "batch_target" => self.batch_target = num(key, value)?,
            "batch_unlabeled" => self.batch_unlabeled = num(key, value)?,
            "lambda_s" => self.lambda_s = num(key, value)?,
            "lambda_t" => self.lambda_t = num(key, value)?,
            "lambda_1" => self.lambda_1 = num(key, value)?,
            "lambda_2" => self.lambda_2 = num(key, value)?,
            "temperature" => self.temperature = num(key, value)?,
            "n_pix" => self.n_pix = num(key, value)?,
            "pc_warmup_steps" => self.pc_warmup_steps = num(key, value)?,
            "p_jitter" => self.p_jitter = num(key, value)?,
            "p_blur" => self.p_blur = num(key, value)?,
            "p_randaug" => self.p_randaug = num(key, value)?,
            "p_cutmix" => self.p_cutmix = num(key, value)?,
            "jitter_brightness" => self.jitter_brightness = num(key, value)?,
            "jitter_contrast" => self.jitter_contrast = num(key, value)?,
            "jitter_saturation" => self.jitter_saturation = num(key, value)?,
            "jitter_hue" => self.jitter_hue = num(key, value)?,
            "blur_sigma_lo" => self.blur_sigma_lo = num(key, value)?,
            "blur_sigma_hi" => self.blur_sigma_hi = num(key, value)?,
            "cutmix_area_lo" => self.cutmix_area_lo = num(key, value)?,
            "cutmix_area_hi" => self.cutmix_area_hi = num(key, value)?,
            "enhance_lo" => self.enhance_lo = num(key, value)?,
            "enhance_hi" => self.enhance_hi = num(key, value)?,
            "posterize_bits_lo" => self.posterize_bits_lo = num(key, value)?,
            "posterize_bits_hi" => self.posterize_bits_hi = num(key, value)?,
            "solarize_lo" => self.solarize_lo = num(key, value)?,
            "solarize_hi" => self.solarize_hi = num(key, value)?,
            "disable_cr" => self.disable_cr = boolean(key, value)?,
            "disable_pc" => self.disable_pc = boolean(key, value)?,
            "disable_class_weights" => self.disable_class_weights = boolean(key, value)?,
            "disable_batch_mix" => self.disable_batch_mix = boolean(key, value)?,
            "cr_variant" => {
                self.cr_variant = match value {
                    "auto" => None,
                    "onehot" => Some(CrMode::OneHot),
                    "prob" => Some(CrMode::Prob),
                    other => {
                        return Err(Error::Config(format!(
                            "cr_variant expects auto, onehot or prob, got {other:?}"
                        )))
                    }
                }
            }
            "styling" => self.styling = Styling::parse(value)?,
            "pc_scope" => self.pc_scope = PcScope::parse(value)?,
            "no_pl_drop" => self.no_pl_drop = boolean(key, value)?,
            other => return Err(Error::Config(format!("unknown config key {other:?}"))),
        }
        Ok(())
    }

    /// The text form of one key's current value.
    pub fn get(&self, key: &str) -> Option<String> {
        let v = match key {
            "setting" => self.setting.name().to_string(),
            "seed" => self.seed.to_string(),
            "run_dir" => self.run_dir.clone(),
            "data_dir" => self.data_dir.clone(),
            "n_source" => self.n_source.to_string(),
            "n_target_pool" => self.n_target_pool.to_string(),
            "n_val" => self.n_val.to_string(),
            "image_size" => self.image_size.to_string(),
            "num_classes" => self.num_classes.to_string(),
            "gap_color_shift" => self.gap_color_shift.to_string(),
            "gap_gamma" => self.gap_gamma.to_string(),
            "gap_noise" => self.gap_noise.to_string(),
            "gap_class_skew" => self.gap_class_skew.to_string(),
            "n_t" => self.n_t.to_string(),
            "in_channels" => self.in_channels.to_string(),
            "base_width" => self.base_width.to_string(),
            "embed_dim" => self.embed_dim.to_string(),
            "dilations" => self
                .dilations
                .iter()
                .map(|d| d.to_string())
                .collect::<Vec<_>>()
                .join(","),
            "downsample" => self.downsample.to_string(),
            "rounds" => self.rounds.to_string(),
            "n_steps" => self.n_steps.to_string(),
            "n_drop" => self.n_drop.to_string(),
            "tau" => self.tau.to_string(),
            "lr" => self.lr.to_string(),
            "momentum" => self.momentum.to_string(),
            "weight_decay" => self.weight_decay.to_string(),
            "clip_norm" => self.clip_norm.to_string(),
            "mu_cap" => self.mu_cap.to_string(),
            "batch_source" => self.batch_source.to_string(),
            "batch_target" => self.batch_target.to_string(),
            "batch_unlabeled" => self.batch_unlabeled.to_string(),
            "lambda_s" => self.lambda_s.to_string(),
            "lambda_t" => self.lambda_t.to_string(),
            "lambda_1" => self.lambda_1.to_string(),
            "lambda_2" => self.lambda_2.to_string(),
            "temperature" => self.temperature.to_string(),
            "n_pix" => self.n_pix.to_string(),
            "pc_warmup_steps" => self.pc_warmup_steps.to_string(),
            "p_jitter" => self.p_jitter.to_string(),
            "p_blur" => self.p_blur.to_string(),
            "p_randaug" => self.p_randaug.to_string(),
            "p_cutmix" => self.p_cutmix.to_string(),
            "jitter_brightness" => self.jitter_brightness.to_string(),
            "jitter_contrast" => self.jitter_contrast.to_string(),
            "jitter_saturation" => self.jitter_saturation.to_string(),
            "jitter_hue" => self.jitter_hue.to_string(),
            "blur_sigma_lo" => self.blur_sigma_lo.to_string(),
            "blur_sigma_hi" => self.blur_sigma_hi.to_string(),
            "cutmix_area_lo" => self.cutmix_area_lo.to_string(),
            "cutmix_area_hi" => self.cutmix_area_hi.to_string(),
            "enhance_lo" => self.enhance_lo.to_string(),
            "enhance_hi" => self.enhance_hi.to_string(),
            "posterize_bits_lo" => self.posterize_bits_lo.to_string(),
            "posterize_bits_hi" => self.posterize_bits_hi.to_string(),
            "solarize_lo" => self.solarize_lo.to_string(),
            "solarize_hi" => self.solarize_hi.to_string(),
            "disable_cr" => self.disable_cr.to_string(),
            "disable_pc" => self.disable_pc.to_string(),
            "disable_class_weights" => self.disable_class_weights.to_string(),
            "disable_batch_mix" => self.disable_batch_mix.to_string(),
            "cr_variant" => match self.cr_variant {
                None => "auto".to_string(),
                Some(CrMode::OneHot) => "onehot".to_string(),
                Some(CrMode::Prob) => "prob".to_string(),
            },
            "styling" => self.styling.name().to_string(),
            "pc_scope" => self.pc_scope.name().to_string(),
            "no_pl_drop" => self.no_pl_drop.to_string(),
            _ => return None,
        };
        Some(v)
    }

    /// Applies `key = value` lines (`#` comments and blank lines skipped)
    /// on top of the current values.
    pub fn apply_text(&mut self, text: &str) -> Result<()> {
        for (i, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| {
                Error::Config(format!("line {}: expected key = value, got {raw:?}", i + 1))
            })?;
            self.set(key.trim(), value.trim())?;
        }
        Ok(())
    }

    pub fn apply_file(&mut self, path: &Path) -> Result<()> {
        let text = fs::read_to_string(path)?;
        self.apply_text(&text)
    }

    /// All keys and their values, one `key = value` per line, in a fixed
    /// order. Parsing this text reproduces the config exactly.
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        for key in KEY_ORDER {
            out.push_str(&format!("{key} = {}\n", self.get(key).unwrap()));
        }
        out
    }

    pub fn model_config(&self) -> TinySegConfig {
        TinySegConfig {
            in_channels: self.in_channels,
            base_width: self.base_width,
            num_classes: self.num_classes,
            embed_dim: self.embed_dim,
            dilations: self.dilations.clone(),
            downsample: self.downsample,
        }
    }

    pub fn loss_config(&self) -> LossConfig {
        LossConfig {
            lambda_s: self.lambda_s,
            lambda_t: self.lambda_t,
            lambda_1: if self.disable_cr { 0.0 } else { self.lambda_1 },
            lambda_2: if self.disable_pc { 0.0 } else { self.lambda_2 },
            temperature: self.temperature,
            n_pix: self.n_pix,
            pc_warmup_steps: self.pc_warmup_steps,
            cr_mode: self.cr_variant,
            pc_scope: self.pc_scope,
            ..LossConfig::for_classes(self.num_classes)
        }
    }

    pub fn aug_config(&self) -> AugConfig {
        AugConfig {
            p_jitter: self.p_jitter,
            p_blur: self.p_blur,
            p_randaug: self.p_randaug,
            p_cutmix: self.p_cutmix,
            jitter_brightness: self.jitter_brightness,
            jitter_contrast: self.jitter_contrast,
            jitter_saturation: self.jitter_saturation,
            jitter_hue: self.jitter_hue,
            blur_sigma: (self.blur_sigma_lo, self.blur_sigma_hi),
            cutmix_area: (self.cutmix_area_lo, self.cutmix_area_hi),
            enhance_range: (self.enhance_lo, self.enhance_hi),
            posterize_bits: (self.posterize_bits_lo, self.posterize_bits_hi),
            solarize_range: (self.solarize_lo, self.solarize_hi),
        }
    }

    pub fn plan(&self) -> SelfTrainPlan {
        SelfTrainPlan {
            rounds: self.rounds,
            n_steps: self.n_steps,
            n_drop: self.n_drop,
            tau: self.tau,
        }
    }

    pub fn gap(&self) -> GapParams {
        GapParams {
            color_shift: self.gap_color_shift,
            gamma: self.gap_gamma,
            noise: self.gap_noise,
            class_skew: self.gap_class_skew,
        }
    }

    pub fn dataset_meta(&self) -> DatasetMeta {
        DatasetMeta {
            classes: self.num_classes,
            size: self.image_size,
            seed: self.seed,
            n_source: self.n_source,
            n_target: self.n_target_pool,
            n_val: self.n_val,
            gap: self.gap(),
        }
    }

    pub fn trainer_config(&self) -> TrainerConfig {
        TrainerConfig {
            setting: self.setting,
            model: self.model_config(),
            loss: self.loss_config(),
            aug: self.aug_config(),
            counts: BatchCounts {
                source: self.batch_source,
                target_labeled: self.batch_target,
                unlabeled: self.batch_unlabeled,
            },
            batch_mix: !self.disable_batch_mix,
            class_weights: !self.disable_class_weights,
            styling: self.styling,
            no_pl_drop: self.no_pl_drop,
            lr: self.lr,
            momentum: self.momentum,
            weight_decay: self.weight_decay,
            clip_norm: self.clip_norm,
            mu_cap: self.mu_cap,
        }
    }

    /// Cross-key consistency; violated combinations name the keys involved.
    pub fn validate(&self) -> Result<()> {
        match self.setting {
            Setting::Uda if self.n_t != 0 => {
                return Err(Error::Config(format!(
                    "setting = uda conflicts with n_t = {}; adaptation without target labels needs n_t = 0",
                    self.n_t
                )))
            }
            Setting::Ssda if self.n_t == 0 => {
                return Err(Error::Config(
                    "setting = ssda conflicts with n_t = 0; use setting = uda when no target labels exist"
                        .into(),
                ))
            }
            Setting::Ssl if self.n_t == 0 => {
                return Err(Error::Config(
                    "setting = ssl conflicts with n_t = 0; the labeled target stream would be empty"
                        .into(),
                ))
            }
            _ => {}
        }
        if self.disable_cr && self.cr_variant.is_some() {
            return Err(Error::Config(format!(
                "cr_variant = {} conflicts with disable_cr = true",
                self.get("cr_variant").unwrap()
            )));
        }
        if self.disable_pc && self.pc_scope != PcScope::Target {
            return Err(Error::Config(format!(
                "pc_scope = {} conflicts with disable_pc = true",
                self.pc_scope.name()
            )));
        }
        if self.n_t > self.n_target_pool {
            return Err(Error::Config(format!(
                "n_t = {} exceeds n_target_pool = {}",
                self.n_t, self.n_target_pool
            )));
        }
        if !self.disable_cr && self.lambda_1 > 0.0 && self.batch_unlabeled == 0 {
            return Err(Error::Config(format!(
                "lambda_1 = {} conflicts with batch_unlabeled = 0; the consistency term needs unlabeled items",
                self.lambda_1
            )));
        }
        if self.downsample == 0 || self.image_size % self.downsample != 0 {
            return Err(Error::Config(format!(
                "image_size = {} must be a positive multiple of downsample = {}",
                self.image_size, self.downsample
            )));
        }
        self.plan().validate()?;
        self.loss_config().validate()?;
        self.aug_config().validate()?;
        Ok(())
    }
}

//! The compact segmentation network and its student/teacher pair.
//!
//! The network is a deliberate miniature of a dilated-convolution
//! segmentation model: a full-resolution stem, one strided downsample, two more
//! 3×3 blocks, a bank of parallel dilated 3×3 convolutions summed into a
//! shared feature map, a 1×1 classifier upsampled back to input resolution,
//! and a 1×1–norm–relu–1×1 projection head producing unit-norm pixel
//! embeddings for the contrastive loss.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::{add, bilinear_upsample, conv2d, l2_normalize, norm2d, relu, ParamSet, Tensor};

/// Architecture hyperparameters.
#[derive(Debug, Clone, PartialEq)]
pub struct TinySegConfig {
    pub in_channels: usize,
    pub base_width: usize,
    pub num_classes: usize,
    pub embed_dim: usize,
    pub dilations: Vec<usize>,
    pub downsample: usize,
}

impl Default for TinySegConfig {
    fn default() -> Self {
        TinySegConfig {
            in_channels: 3,
            base_width: 16,
            num_classes: 5,
            embed_dim: 32,
            dilations: vec![1, 2, 4],
            downsample: 2,
        }
    }
}

impl TinySegConfig {
    pub fn validate(&self) -> Result<()> {
        if self.num_classes < 2 {
            return Err(Error::Config(format!(
                "num_classes must be at least 2, got {}",
                self.num_classes
            )));
        }
        if self.embed_dim < 2 {
            return Err(Error::Config(format!(
                "embed_dim must be at least 2, got {}",
                self.embed_dim
            )));
        }
        if self.in_channels == 0 || self.base_width == 0 || self.downsample == 0 {
            return Err(Error::Config(
                "channel counts and downsample must be positive".into(),
            ));
        }
        if self.dilations.is_empty() || self.dilations.iter().any(|&r| r == 0) {
            return Err(Error::Config(
                "dilation rates must be positive and non-empty".into(),
            ));
        }
        Ok(())
    }
}

/// Normalization-statistics mode for a forward pass.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    /// Batch statistics; running buffers are updated.
    Train,
    /// Batch statistics; running buffers are left untouched (teacher
    /// consistency passes).
    TrainNoUpdate,
    /// Running statistics; fully deterministic.
    Eval,
}

impl Mode {
    fn norm_flags(self) -> (bool, bool) {
        match self {
            Mode::Train => (true, true),
            Mode::TrainNoUpdate => (true, false),
            Mode::Eval => (false, false),
        }
    }
}

fn kaiming_uniform<S: Scalar>(rng: &mut ChaCha8Rng, fan_in: usize, n: usize) -> Vec<S> {
    let bound = (6.0 / fan_in as f64).sqrt();
    (0..n)
        .map(|_| S::cast(rng.gen::<f64>() * 2.0 * bound - bound))
        .collect()
}

fn insert_conv<S: Scalar>(
    ps: &mut ParamSet<S>,
    rng: &mut ChaCha8Rng,
    name: &str,
    cout: usize,
    cin: usize,
    k: usize,
) {
    let fan_in = cin * k * k;
    let n = cout * cin * k * k;
    ps.insert_param(
        &format!("{name}.weight"),
        &[cout, cin, k, k],
        kaiming_uniform(rng, fan_in, n),
    );
    // companion bias init: U(-1/sqrt(fan_in), 1/sqrt(fan_in))
    let b_bound = 1.0 / (fan_in as f64).sqrt();
    let bias = (0..cout)
        .map(|_| S::cast(rng.gen::<f64>() * 2.0 * b_bound - b_bound))
        .collect();
    ps.insert_param(&format!("{name}.bias"), &[cout], bias);
}

fn insert_norm<S: Scalar>(ps: &mut ParamSet<S>, name: &str, ch: usize) {
    ps.insert_param(&format!("{name}.gamma"), &[ch], vec![S::one(); ch]);
    ps.insert_param(&format!("{name}.beta"), &[ch], vec![S::zero(); ch]);
    ps.insert_buffer(&format!("{name}.running_mean"), &[ch], vec![S::zero(); ch]);
    ps.insert_buffer(&format!("{name}.running_var"), &[ch], vec![S::one(); ch]);
}

/// Builds a freshly initialized parameter set for the architecture.
/// Weights are Kaiming-uniform from the seed, biases zero, norms identity.
/// The same seed always produces bit-identical values.
pub fn build<S: Scalar>(config: &TinySegConfig, seed: u64) -> Result<ParamSet<S>> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let w = config.base_width;
    let mut ps = ParamSet::new();

    insert_conv(&mut ps, &mut rng, "stem.conv", w, config.in_channels, 3);
    insert_norm(&mut ps, "stem.norm", w);
    insert_conv(&mut ps, &mut rng, "down.conv", w, w, config.downsample);
    insert_norm(&mut ps, "down.norm", w);
    insert_conv(&mut ps, &mut rng, "block2.conv", w, w, 3);
    insert_norm(&mut ps, "block2.norm", w);
    insert_conv(&mut ps, &mut rng, "block3.conv", w, w, 3);
    insert_norm(&mut ps, "block3.norm", w);
    for (i, _) in config.dilations.iter().enumerate() {
        insert_conv(&mut ps, &mut rng, &format!("context.{i}.conv"), w, w, 3);
    }
    insert_norm(&mut ps, "context.norm", w);
    insert_conv(&mut ps, &mut rng, "classifier", config.num_classes, w, 1);
    insert_conv(&mut ps, &mut rng, "proj.conv1", w, w, 1);
    insert_norm(&mut ps, "proj.norm", w);
    insert_conv(&mut ps, &mut rng, "proj.conv2", config.embed_dim, w, 1);
    Ok(ps)
}

fn conv_block<S: Scalar>(
    ps: &ParamSet<S>,
    name: &str,
    x: &Tensor<S>,
    stride: usize,
    padding: usize,
    dilation: usize,
    mode: Mode,
) -> Result<Tensor<S>> {
    let c = conv2d(
        x,
        ps.get(&format!("{name}.conv.weight")),
        Some(ps.get(&format!("{name}.conv.bias"))),
        stride,
        padding,
        dilation,
    )?;
    let (training, update) = mode.norm_flags();
    let n = norm2d(
        &c,
        ps.get(&format!("{name}.norm.gamma")),
        ps.get(&format!("{name}.norm.beta")),
        ps.get(&format!("{name}.norm.running_mean")),
        ps.get(&format!("{name}.norm.running_var")),
        training,
        update,
        NORM_EPS,
        NORM_MOMENTUM,
    )?;
    Ok(relu(&n))
}

pub const NORM_EPS: f64 = 1e-5;
pub const NORM_MOMENTUM: f64 = 0.1;

/// Output of a full forward pass. `embeddings` is present only when the
/// projection head was requested.
pub struct ForwardParts<S: Scalar> {
    /// Class logits at input resolution, `[B, C, H, W]`.
    pub logits: Tensor<S>,
    /// Class logits at head resolution, `[B, C, H/down, W/down]`.
    pub head_logits: Tensor<S>,
    /// Unit-norm pixel embeddings `[B, D, H/down, W/down]`.
    pub embeddings: Option<Tensor<S>>,
}

/// Full forward pass; computes the projection head only when `with_proj`.
pub fn forward_parts<S: Scalar>(
    params: &ParamSet<S>,
    config: &TinySegConfig,
    images: &Tensor<S>,
    mode: Mode,
    with_proj: bool,
) -> Result<ForwardParts<S>> {
    let shape = images.shape().to_vec();
    if shape.len() != 4 || shape[1] != config.in_channels {
        return Err(Error::Argument(format!(
            "expected images [B,{},H,W], got {:?}",
            config.in_channels, shape
        )));
    }
    let (h, w) = (shape[2], shape[3]);
    let ds = config.downsample;
    if h % ds != 0 || w % ds != 0 {
        return Err(Error::Config(format!(
            "input {h}x{w} not divisible by downsample factor {ds}"
        )));
    }

    let x = conv_block(params, "stem", images, 1, 1, 1, mode)?;
    let x = conv_block(params, "down", &x, ds, 0, 1, mode)?;
    let x = conv_block(params, "block2", &x, 1, 1, 1, mode)?;
    let x = conv_block(params, "block3", &x, 1, 1, 1, mode)?;

    // parallel dilated context branches, summed
    let mut ctx: Option<Tensor<S>> = None;
    for (i, &rate) in config.dilations.iter().enumerate() {
        let b = conv2d(
            &x,
            params.get(&format!("context.{i}.conv.weight")),
            Some(params.get(&format!("context.{i}.conv.bias"))),
            1,
            rate,
            rate,
        )?;
        ctx = Some(match ctx {
            Some(acc) => add(&acc, &b)?,
            None => b,
        });
    }
    let ctx = ctx.expect("validated non-empty dilations");
    let (training, update) = mode.norm_flags();
    let feat = relu(&norm2d(
        &ctx,
        params.get("context.norm.gamma"),
        params.get("context.norm.beta"),
        params.get("context.norm.running_mean"),
        params.get("context.norm.running_var"),
        training,
        update,
        NORM_EPS,
        NORM_MOMENTUM,
    )?);

    let head_logits = conv2d(
        &feat,
        params.get("classifier.weight"),
        Some(params.get("classifier.bias")),
        1,
        0,
        1,
    )?;
    let logits = bilinear_upsample(&head_logits, h, w)?;

    let embeddings = if with_proj {
        let p = conv2d(
            &feat,
            params.get("proj.conv1.weight"),
            Some(params.get("proj.conv1.bias")),
            1,
            0,
            1,
        )?;
        let p = relu(&norm2d(
            &p,
            params.get("proj.norm.gamma"),
            params.get("proj.norm.beta"),
            params.get("proj.norm.running_mean"),
            params.get("proj.norm.running_var"),
            training,
            update,
            NORM_EPS,
            NORM_MOMENTUM,
        )?);
        let p = conv2d(
            &p,
            params.get("proj.conv2.weight"),
            Some(params.get("proj.conv2.bias")),
            1,
            0,
            1,
        )?;
        Some(l2_normalize(&p, 1, 1e-12)?)
    } else {
        None
    };

    Ok(ForwardParts {
        logits,
        head_logits,
        embeddings,
    })
}

/// Class logits at input resolution.
pub fn forward_seg<S: Scalar>(
    params: &ParamSet<S>,
    config: &TinySegConfig,
    images: &Tensor<S>,
    mode: Mode,
) -> Result<Tensor<S>> {
    Ok(forward_parts(params, config, images, mode, false)?.logits)
}

/// Unit-norm pixel embeddings at head resolution.
pub fn forward_proj<S: Scalar>(
    params: &ParamSet<S>,
    config: &TinySegConfig,
    images: &Tensor<S>,
    mode: Mode,
) -> Result<Tensor<S>> {
    let parts = forward_parts(params, config, images, mode, true)?;
    Ok(parts.embeddings.expect("requested projection"))
}

/// EMA decay schedule: μ = min(cap, (step+1)/(step+10)).
pub fn mu_schedule(step: u64, cap: f64) -> f64 {
    let ramp = (step as f64 + 1.0) / (step as f64 + 10.0);
    ramp.min(cap)
}

/// Student/teacher parameter pair with the EMA update state.
pub struct ModelPair<S: Scalar> {
    pub student: ParamSet<S>,
    pub teacher: ParamSet<S>,
    pub step: u64,
    pub mu_cap: f64,
    pub config: TinySegConfig,
}

impl<S: Scalar> ModelPair<S> {
    /// Fresh pair: the teacher starts as an exact detached copy of the
    /// student.
    pub fn new(config: TinySegConfig, seed: u64) -> Result<Self> {
        let student = build::<S>(&config, seed)?;
        let teacher = student.clone_detached();
        Ok(ModelPair {
            student,
            teacher,
            step: 0,
            mu_cap: 0.995,
            config,
        })
    }

    pub fn from_sets(
        config: TinySegConfig,
        student: ParamSet<S>,
        teacher: ParamSet<S>,
    ) -> Result<Self> {
        let template = build::<S>(&config, 0)?;
        for side in [&student, &teacher] {
            if side.len() != template.len() {
                return Err(Error::Integrity(format!(
                    "parameter count {} does not match architecture ({})",
                    side.len(),
                    template.len()
                )));
            }
            for (name, t, _) in template.iter_all() {
                match side.try_get(name) {
                    Some(s) if s.shape() == t.shape() => {}
                    Some(s) => {
                        return Err(Error::Integrity(format!(
                            "tensor {name}: shape {:?} does not match architecture {:?}",
                            s.shape(),
                            t.shape()
                        )))
                    }
                    None => {
                        return Err(Error::Integrity(format!(
                            "tensor {name} missing from loaded parameters"
                        )))
                    }
                }
            }
        }
        Ok(ModelPair {
            student,
            teacher,
            step: 0,
            mu_cap: 0.995,
            config,
        })
    }

    pub fn mu(&self) -> f64 {
        mu_schedule(self.step, self.mu_cap)
    }

    /// Teacher ← μ·teacher + (1−μ)·student for every parameter and buffer,
    /// with a caller-provided μ.
    pub fn ema_step_with_mu(&mut self, mu: f64) -> Result<()> {
        let m = S::cast(mu);
        let one_m = S::one() - m;
        for (name, s_t, _) in self.student.iter_all() {
            let t_t = self
                .teacher
                .try_get(name)
                .ok_or_else(|| Error::Integrity(format!("teacher is missing tensor {name}")))?;
            if t_t.shape() != s_t.shape() {
                return Err(Error::shape("ema_update", t_t.shape(), s_t.shape()));
            }
            let s = s_t.data();
            let mut t = t_t.data_vec();
            for (tv, &sv) in t.iter_mut().zip(s.iter()) {
                *tv = m * *tv + one_m * sv;
            }
            t_t.set_data(t);
        }
        Ok(())
    }

    /// One scheduled EMA update; advances the schedule step.
    pub fn ema_update(&mut self) -> Result<()> {
        let mu = self.mu();
        self.ema_step_with_mu(mu)?;
        self.step += 1;
        Ok(())
    }
}

const CKPT_MAGIC: &[u8; 8] = b"SSDACKPT";
const CKPT_VERSION: u32 = 1;
const DTYPE_F32: u8 = 0;

fn write_tensor<S: Scalar>(w: &mut impl Write, name: &str, t: &Tensor<S>) -> Result<()> {
    let name_bytes = name.as_bytes();
    if name_bytes.len() > u16::MAX as usize {
        return Err(Error::Argument(format!("tensor name too long: {name}")));
    }
    w.write_all(&(name_bytes.len() as u16).to_le_bytes())?;
    w.write_all(name_bytes)?;
    let shape = t.shape();
    if shape.len() > u8::MAX as usize {
        return Err(Error::Argument("tensor rank exceeds format limit".into()));
    }
    w.write_all(&[shape.len() as u8])?;
    for &d in shape {
        w.write_all(&(d as u64).to_le_bytes())?;
    }
    w.write_all(&[DTYPE_F32])?;
    for v in t.data().iter() {
        w.write_all(&(v.to_f64_lossy() as f32).to_le_bytes())?;
    }
    Ok(())
}

/// Serializes both halves of the pair. Tensors are written in lexicographic
/// name order with "student." / "teacher." prefixes, values as f32, so the
/// same pair always produces byte-identical files.
pub fn save_checkpoint<S: Scalar>(path: &Path, pair: &ModelPair<S>) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    w.write_all(CKPT_MAGIC)?;
    w.write_all(&CKPT_VERSION.to_le_bytes())?;
    let count = pair.student.len() + pair.teacher.len();
    w.write_all(&(count as u32).to_le_bytes())?;
    // "student." sorts before "teacher.", so the combined stream is itself
    // in lexicographic order
    for (name, t, _) in pair.student.iter_all() {
        write_tensor(&mut w, &format!("student.{name}"), t)?;
    }
    for (name, t, _) in pair.teacher.iter_all() {
        write_tensor(&mut w, &format!("teacher.{name}"), t)?;
    }
    w.flush()?;
    Ok(())
}

fn read_exact_buf(r: &mut impl Read, n: usize) -> Result<Vec<u8>> {
    let mut buf = vec![0u8; n];
    r.read_exact(&mut buf)?;
    Ok(buf)
}

fn read_u16(r: &mut impl Read) -> Result<u16> {
    Ok(u16::from_le_bytes(
        read_exact_buf(r, 2)?.try_into().unwrap(),
    ))
}

fn read_u32(r: &mut impl Read) -> Result<u32> {
    Ok(u32::from_le_bytes(
        read_exact_buf(r, 4)?.try_into().unwrap(),
    ))
}

fn read_u64(r: &mut impl Read) -> Result<u64> {
    Ok(u64::from_le_bytes(
        read_exact_buf(r, 8)?.try_into().unwrap(),
    ))
}

/// Reads a checkpoint back into a validated pair for the given architecture.
pub fn load_checkpoint<S: Scalar>(path: &Path, config: &TinySegConfig) -> Result<ModelPair<S>> {
    let mut r = BufReader::new(File::open(path)?);
    let magic = read_exact_buf(&mut r, 8)?;
    if magic != CKPT_MAGIC {
        return Err(Error::Data(format!(
            "not a checkpoint file: bad magic {magic:?}"
        )));
    }
    let version = read_u32(&mut r)?;
    if version != CKPT_VERSION {
        return Err(Error::Data(format!(
            "unsupported checkpoint version {version}"
        )));
    }
    let count = read_u32(&mut r)? as usize;

    // the architecture template tells us which names are buffers
    let template = build::<S>(config, 0)?;
    let mut student = ParamSet::new();
    let mut teacher = ParamSet::new();
    for _ in 0..count {
        let name_len = read_u16(&mut r)? as usize;
        let name = String::from_utf8(read_exact_buf(&mut r, name_len)?)
            .map_err(|_| Error::Data("tensor name is not valid UTF-8".into()))?;
        let rank = read_exact_buf(&mut r, 1)?[0] as usize;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(read_u64(&mut r)? as usize);
        }
        let dtype = read_exact_buf(&mut r, 1)?[0];
        if dtype != DTYPE_F32 {
            return Err(Error::Data(format!("unsupported dtype tag {dtype}")));
        }
        let numel: usize = shape.iter().product();
        let raw = read_exact_buf(&mut r, numel * 4)?;
        let data: Vec<S> = raw
            .chunks_exact(4)
            .map(|b| S::cast(f32::from_le_bytes(b.try_into().unwrap()) as f64))
            .collect();

        let (side, bare) = if let Some(rest) = name.strip_prefix("student.") {
            (&mut student, rest.to_string())
        } else if let Some(rest) = name.strip_prefix("teacher.") {
            (&mut teacher, rest.to_string())
        } else {
            return Err(Error::Data(format!(
                "tensor {name} has neither student. nor teacher. prefix"
            )));
        };
        match template.try_get(&bare) {
            Some(_) if template.kind(&bare) == crate::tensor::EntryKind::Buffer => {
                side.insert_buffer(&bare, &shape, data)
            }
            Some(_) => side.insert_param(&bare, &shape, data),
            None => {
                return Err(Error::Integrity(format!(
                    "checkpoint tensor {name} is not part of the architecture"
                )))
            }
        }
    }
    let mut probe = [0u8; 1];
    if r.read(&mut probe)? != 0 {
        return Err(Error::Data("trailing bytes after last tensor".into()));
    }
    ModelPair::from_sets(config.clone(), student, teacher)
}

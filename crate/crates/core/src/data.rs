//! Procedural two-domain segmentation data: scene generator, labeled /
//! unlabeled split, class statistics, the PNM on-disk format, and the mixed
//! batch sampler.
//!
//! Scenes are layered primitives: a sky band (class 0) over a ground band
//! (class 1), with rectangles, ellipses and bars (classes 2..C-1) painted on
//! top. The target domain differs from the source by a parameterized gap:
//! per-channel gamma, a global color shift, extra texture noise, and a skew
//! of the shape-class distribution. All pixel values are quantized to 8-bit
//! steps at generation time, so in-memory datasets and datasets reloaded
//! from disk are bit-identical.

use std::collections::BTreeMap;
use std::fs;
use std::io::Write as _;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::rng::derive_rng;

/// Label value marking pixels excluded from losses and metrics.
pub const IGNORE_LABEL: u8 = 255;

/// Base texture-noise amplitude shared by both domains.
const BASE_NOISE: f64 = 0.02;

/// Which stream of the training mix a sample set feeds.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Role {
    Source,
    TargetLabeled,
    TargetUnlabeled,
    TargetPseudolabeled,
}

/// One image with an optional pixel label map.
///
/// Images are stored planar channel-major (`[3, H, W]` flattened), values in
/// [0,1] quantized to multiples of 1/255. Labels are `H*W` bytes with class
/// indices or [`IGNORE_LABEL`].
#[derive(Debug, Clone)]
pub struct LabeledImage {
    pub id: String,
    pub size: usize,
    pub image: Vec<f32>,
    pub label: Option<Vec<u8>>,
}

/// A named collection of samples playing one [`Role`].
#[derive(Debug, Clone)]
pub struct SampleSet {
    pub role: Role,
    pub items: Vec<LabeledImage>,
}

impl SampleSet {
    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    /// Image side length; sets are homogeneous.
    pub fn size(&self) -> Option<usize> {
        self.items.first().map(|i| i.size)
    }
}

/// Parameterized source→target distribution shift. All zeros mean both
/// domains are draws from the same distribution.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GapParams {
    /// Global color offset strength (applied along a fixed warm-to-cold axis).
    pub color_shift: f64,
    /// Per-channel gamma strength.
    pub gamma: f64,
    /// Extra target texture-noise amplitude.
    pub noise: f64,
    /// Skew of the shape-class draw (0 = uniform like the source).
    pub class_skew: f64,
}

impl Default for GapParams {
    fn default() -> Self {
        GapParams {
            color_shift: 0.0,
            gamma: 0.0,
            noise: 0.0,
            class_skew: 0.0,
        }
    }
}

impl GapParams {
    pub fn is_zero(&self) -> bool {
        *self == GapParams::default()
    }
}

fn hsv_to_rgb(h: f64, s: f64, v: f64) -> [f64; 3] {
    let h = (h.fract() + 1.0).fract() * 6.0;
    let i = h.floor() as i32 % 6;
    let f = h - h.floor();
    let p = v * (1.0 - s);
    let q = v * (1.0 - s * f);
    let t = v * (1.0 - s * (1.0 - f));
    match i {
        0 => [v, t, p],
        1 => [q, v, p],
        2 => [p, v, t],
        3 => [p, q, v],
        4 => [t, p, v],
        _ => [v, p, q],
    }
}

/// Base color per class: fixed band colors, golden-angle hues for shapes.
fn class_color(c: usize) -> [f64; 3] {
    match c {
        0 => [0.55, 0.66, 0.86],
        1 => [0.36, 0.47, 0.27],
        _ => hsv_to_rgb(0.02 + 0.381_966 * (c - 2) as f64, 0.62, 0.78),
    }
}

/// Categorical draw over `n` outcomes with weights exp(skew * i).
fn sample_skewed(rng: &mut ChaCha8Rng, n: usize, skew: f64) -> usize {
    if n == 1 || skew == 0.0 {
        return rng.gen_range(0..n);
    }
    let weights: Vec<f64> = (0..n).map(|i| (skew * i as f64).exp()).collect();
    let total: f64 = weights.iter().sum();
    let mut u = rng.gen::<f64>() * total;
    for (i, w) in weights.iter().enumerate() {
        if u < *w {
            return i;
        }
        u -= w;
    }
    n - 1
}

fn jitter(rng: &mut ChaCha8Rng, base: [f64; 3], amp: f64) -> [f64; 3] {
    [
        base[0] + (rng.gen::<f64>() * 2.0 - 1.0) * amp,
        base[1] + (rng.gen::<f64>() * 2.0 - 1.0) * amp,
        base[2] + (rng.gen::<f64>() * 2.0 - 1.0) * amp,
    ]
}

fn paint(
    img: &mut [f64],
    label: &mut [u8],
    size: usize,
    x: usize,
    y: usize,
    color: [f64; 3],
    c: u8,
) {
    let px = y * size + x;
    let plane = size * size;
    img[px] = color[0];
    img[plane + px] = color[1];
    img[2 * plane + px] = color[2];
    label[px] = c;
}

/// Renders one clean scene; returns channel-major floats (pre-noise) and the
/// pixel-accurate label map.
fn render_scene(
    rng: &mut ChaCha8Rng,
    size: usize,
    num_classes: usize,
    class_skew: f64,
) -> (Vec<f64>, Vec<u8>) {
    let plane = size * size;
    let mut img = vec![0.0f64; 3 * plane];
    let mut label = vec![0u8; plane];

    let horizon = ((0.3 + rng.gen::<f64>() * 0.4) * size as f64).round() as usize;
    let horizon = horizon.clamp(1, size - 1);
    let sky = jitter(rng, class_color(0), 0.08);
    let ground = jitter(rng, class_color(1), 0.08);
    for y in 0..size {
        let (color, c) = if y < horizon {
            (sky, 0u8)
        } else {
            (ground, 1u8)
        };
        for x in 0..size {
            paint(&mut img, &mut label, size, x, y, color, c);
        }
    }

    if num_classes <= 2 {
        return (img, label);
    }
    let shape_classes = num_classes - 2;
    let n_shapes = rng.gen_range(3..=7);
    for _ in 0..n_shapes {
        let cls = 2 + sample_skewed(rng, shape_classes, class_skew);
        let color = jitter(rng, class_color(cls), 0.06);
        let cx = rng.gen::<f64>() * size as f64;
        let cy = rng.gen::<f64>() * size as f64;
        let kind = (cls - 2) % 3;
        // half extents per primitive kind
        let (hx, hy) = match kind {
            0 | 1 => {
                let a = (0.08 + rng.gen::<f64>() * 0.12) * size as f64;
                let aspect = 0.5 + rng.gen::<f64>() * 1.5;
                (a, (a * aspect).max(1.0))
            }
            _ => {
                let thin = (0.02 + rng.gen::<f64>() * 0.05) * size as f64;
                let long = (0.18 + rng.gen::<f64>() * 0.27) * size as f64;
                if rng.gen::<bool>() {
                    (long, thin.max(0.8))
                } else {
                    (thin.max(0.8), long)
                }
            }
        };
        let x_lo = ((cx - hx).floor().max(0.0)) as usize;
        let x_hi = ((cx + hx).ceil().min(size as f64)) as usize;
        let y_lo = ((cy - hy).floor().max(0.0)) as usize;
        let y_hi = ((cy + hy).ceil().min(size as f64)) as usize;
        for y in y_lo..y_hi {
            for x in x_lo..x_hi {
                let inside = if kind == 1 {
                    let dx = (x as f64 + 0.5 - cx) / hx;
                    let dy = (y as f64 + 0.5 - cy) / hy;
                    dx * dx + dy * dy <= 1.0
                } else {
                    true
                };
                if inside {
                    paint(&mut img, &mut label, size, x, y, color, cls as u8);
                }
            }
        }
    }
    (img, label)
}

/// Applies the target-domain appearance shift in place (gamma, then color
/// offset). Channel directions are fixed so a single scalar controls each
/// effect's strength.
fn apply_gap_appearance(img: &mut [f64], plane: usize, gap: &GapParams) {
    if gap.gamma != 0.0 {
        let gammas = [
            1.0 + 0.8 * gap.gamma,
            1.0 + 0.1 * gap.gamma,
            (1.0 - 0.5 * gap.gamma).max(0.2),
        ];
        for (c, g) in gammas.iter().enumerate() {
            for v in &mut img[c * plane..(c + 1) * plane] {
                *v = v.clamp(0.0, 1.0).powf(*g);
            }
        }
    }
    if gap.color_shift != 0.0 {
        let deltas = [
            0.9 * gap.color_shift,
            0.1 * gap.color_shift,
            -0.8 * gap.color_shift,
        ];
        for (c, d) in deltas.iter().enumerate() {
            for v in &mut img[c * plane..(c + 1) * plane] {
                *v += d;
            }
        }
    }
}

fn quantize(img: &[f64]) -> Vec<f32> {
    img.iter()
        .map(|&v| ((v.clamp(0.0, 1.0) * 255.0).round() / 255.0) as f32)
        .collect()
}

fn generate_one(
    seed: u64,
    domain: &str,
    index: usize,
    size: usize,
    num_classes: usize,
    gap: &GapParams,
    is_target: bool,
) -> LabeledImage {
    let mut rng = derive_rng(seed, &format!("gen/{domain}/{index}"));
    let skew = if is_target { gap.class_skew } else { 0.0 };
    let (mut img, label) = render_scene(&mut rng, size, num_classes, skew);
    let plane = size * size;
    if is_target {
        apply_gap_appearance(&mut img, plane, gap);
    }
    let amp = BASE_NOISE + if is_target { gap.noise } else { 0.0 };
    for v in img.iter_mut() {
        *v += (rng.gen::<f64>() * 2.0 - 1.0) * amp;
    }
    LabeledImage {
        id: format!("{}{index:04}", &domain[..1]),
        size,
        image: quantize(&img),
        label: Some(label),
    }
}

/// Generates the source set and the (fully labeled) target pool.
/// Deterministic per seed; every image gets its own derived stream.
pub fn generate_domains(
    seed: u64,
    n_source: usize,
    n_target: usize,
    size: usize,
    num_classes: usize,
    gap: &GapParams,
) -> Result<(SampleSet, SampleSet)> {
    if num_classes < 2 {
        return Err(Error::Config(format!(
            "need at least 2 classes, got {num_classes}"
        )));
    }
    if size < 4 {
        return Err(Error::Config(format!("image size {size} too small")));
    }
    let source = SampleSet {
        role: Role::Source,
        items: (0..n_source)
            .map(|i| generate_one(seed, "source", i, size, num_classes, gap, false))
            .collect(),
    };
    let target = SampleSet {
        role: Role::TargetLabeled,
        items: (0..n_target)
            .map(|i| generate_one(seed, "target", i, size, num_classes, gap, true))
            .collect(),
    };
    Ok((source, target))
}

/// Extra images from the target distribution for held-out evaluation.
pub fn generate_validation(
    seed: u64,
    n_val: usize,
    size: usize,
    num_classes: usize,
    gap: &GapParams,
) -> SampleSet {
    SampleSet {
        role: Role::TargetLabeled,
        items: (0..n_val)
            .map(|i| generate_one(seed, "val", i, size, num_classes, gap, true))
            .collect(),
    }
}

/// Splits the target pool into `N_t` labeled items and the remainder with
/// labels stripped. Membership is a uniform draw per seed; both halves keep
/// pool order.
pub fn split_target(pool: &SampleSet, n_t: usize, seed: u64) -> Result<(SampleSet, SampleSet)> {
    if n_t > pool.len() {
        return Err(Error::Argument(format!(
            "cannot label {n_t} of {} pool items",
            pool.len()
        )));
    }
    let mut order: Vec<usize> = (0..pool.len()).collect();
    order.shuffle(&mut derive_rng(seed, "split"));
    let mut chosen = order[..n_t].to_vec();
    chosen.sort_unstable();
    let mut labeled = Vec::with_capacity(n_t);
    let mut unlabeled = Vec::with_capacity(pool.len() - n_t);
    let mut pick = chosen.iter().peekable();
    for (i, item) in pool.items.iter().enumerate() {
        if pick.peek() == Some(&&i) {
            pick.next();
            labeled.push(item.clone());
        } else {
            let mut stripped = item.clone();
            stripped.label = None;
            unlabeled.push(stripped);
        }
    }
    Ok((
        SampleSet {
            role: Role::TargetLabeled,
            items: labeled,
        },
        SampleSet {
            role: Role::TargetUnlabeled,
            items: unlabeled,
        },
    ))
}

/// Fraction of non-ignored pixels per class across all labeled items.
pub fn class_frequencies(set: &SampleSet, num_classes: usize) -> Result<Vec<f64>> {
    let mut counts = vec![0u64; num_classes];
    for item in &set.items {
        let Some(label) = &item.label else { continue };
        for &l in label {
            if l == IGNORE_LABEL {
                continue;
            }
            if l as usize >= num_classes {
                return Err(Error::Data(format!(
                    "label {l} out of range for {num_classes} classes in {}",
                    item.id
                )));
            }
            counts[l as usize] += 1;
        }
    }
    let total: u64 = counts.iter().sum();
    if total == 0 {
        return Err(Error::EmptySet(
            "class frequencies need at least one labeled pixel".into(),
        ));
    }
    Ok(counts.iter().map(|&c| c as f64 / total as f64).collect())
}

// ---------------------------------------------------------------------------
// PNM image files
// ---------------------------------------------------------------------------

fn write_pnm(path: &Path, magic: &str, width: usize, height: usize, bytes: &[u8]) -> Result<()> {
    let mut f = fs::File::create(path)?;
    write!(f, "{magic}\n{width} {height}\n255\n")?;
    f.write_all(bytes)?;
    Ok(())
}

/// Binary 8-bit PPM (P6) from a channel-major [0,1] image.
pub fn write_ppm(path: &Path, width: usize, height: usize, chw: &[f32]) -> Result<()> {
    if chw.len() != 3 * width * height {
        return Err(Error::Argument(
            "image buffer does not match dimensions".into(),
        ));
    }
    let plane = width * height;
    let mut bytes = Vec::with_capacity(3 * plane);
    for px in 0..plane {
        for c in 0..3 {
            bytes.push((chw[c * plane + px].clamp(0.0, 1.0) * 255.0).round() as u8);
        }
    }
    write_pnm(path, "P6", width, height, &bytes)
}

/// Binary 8-bit PGM (P5) from raw label bytes.
pub fn write_pgm(path: &Path, width: usize, height: usize, values: &[u8]) -> Result<()> {
    if values.len() != width * height {
        return Err(Error::Argument(
            "label buffer does not match dimensions".into(),
        ));
    }
    write_pnm(path, "P5", width, height, values)
}

/// Parses a PNM header (whitespace- and comment-tolerant), returning
/// (width, height, data offset).
fn parse_pnm_header(bytes: &[u8], magic: &str, path: &Path) -> Result<(usize, usize, usize)> {
    let bad = |msg: &str| Error::Data(format!("{}: {msg}", path.display()));
    if bytes.len() < 2 || &bytes[..2] != magic.as_bytes() {
        return Err(bad(&format!("expected {magic} file")));
    }
    let mut pos = 2;
    let mut fields = [0usize; 3];
    for field in fields.iter_mut() {
        // skip whitespace and '#' comments
        loop {
            match bytes.get(pos) {
                Some(b) if b.is_ascii_whitespace() => pos += 1,
                Some(b'#') => {
                    while pos < bytes.len() && bytes[pos] != b'\n' {
                        pos += 1;
                    }
                }
                Some(_) => break,
                None => return Err(bad("truncated header")),
            }
        }
        let start = pos;
        while pos < bytes.len() && bytes[pos].is_ascii_digit() {
            pos += 1;
        }
        if start == pos {
            return Err(bad("malformed header field"));
        }
        *field = std::str::from_utf8(&bytes[start..pos])
            .unwrap()
            .parse()
            .map_err(|_| bad("header field out of range"))?;
    }
    if fields[2] != 255 {
        return Err(bad("only 8-bit files are supported"));
    }
    // exactly one whitespace byte separates header and raster
    if !bytes.get(pos).is_some_and(|b| b.is_ascii_whitespace()) {
        return Err(bad("missing raster separator"));
    }
    Ok((fields[0], fields[1], pos + 1))
}

/// Reads a P6 file into a channel-major [0,1] image.
pub fn read_ppm(path: &Path) -> Result<(usize, usize, Vec<f32>)> {
    let bytes = fs::read(path)?;
    let (w, h, off) = parse_pnm_header(&bytes, "P6", path)?;
    let plane = w * h;
    let raster = &bytes[off..];
    if raster.len() != 3 * plane {
        return Err(Error::Data(format!(
            "{}: raster size {} does not match {w}x{h}",
            path.display(),
            raster.len()
        )));
    }
    let mut chw = vec![0.0f32; 3 * plane];
    for px in 0..plane {
        for c in 0..3 {
            chw[c * plane + px] = raster[3 * px + c] as f32 / 255.0;
        }
    }
    Ok((w, h, chw))
}

/// Reads a P5 file as raw label bytes.
pub fn read_pgm(path: &Path) -> Result<(usize, usize, Vec<u8>)> {
    let bytes = fs::read(path)?;
    let (w, h, off) = parse_pnm_header(&bytes, "P5", path)?;
    let raster = bytes[off..].to_vec();
    if raster.len() != w * h {
        return Err(Error::Data(format!(
            "{}: raster size {} does not match {w}x{h}",
            path.display(),
            raster.len()
        )));
    }
    Ok((w, h, raster))
}

// ---------------------------------------------------------------------------
// Dataset directory
// ---------------------------------------------------------------------------

/// Generation parameters recorded alongside a dataset.
#[derive(Debug, Clone, PartialEq)]
pub struct DatasetMeta {
    pub classes: usize,
    pub size: usize,
    pub seed: u64,
    pub n_source: usize,
    pub n_target: usize,
    pub n_val: usize,
    pub gap: GapParams,
}

/// A dataset as stored on disk: source set, fully labeled target pool, and
/// held-out validation images.
pub struct Dataset {
    pub meta: DatasetMeta,
    pub source: SampleSet,
    pub target_pool: SampleSet,
    pub val: SampleSet,
}

impl Dataset {
    /// Generates all three sets from the meta parameters.
    pub fn generate(meta: DatasetMeta) -> Result<Dataset> {
        let (source, target_pool) = generate_domains(
            meta.seed,
            meta.n_source,
            meta.n_target,
            meta.size,
            meta.classes,
            &meta.gap,
        )?;
        let val = generate_validation(meta.seed, meta.n_val, meta.size, meta.classes, &meta.gap);
        Ok(Dataset {
            meta,
            source,
            target_pool,
            val,
        })
    }
}

fn meta_to_text(meta: &DatasetMeta) -> String {
    format!(
        "classes={}\nsize={}\nseed={}\nn_source={}\nn_target={}\nn_val={}\n\
         gap_color_shift={}\ngap_gamma={}\ngap_noise={}\ngap_class_skew={}\n",
        meta.classes,
        meta.size,
        meta.seed,
        meta.n_source,
        meta.n_target,
        meta.n_val,
        meta.gap.color_shift,
        meta.gap.gamma,
        meta.gap.noise,
        meta.gap.class_skew
    )
}

fn meta_from_text(text: &str) -> Result<DatasetMeta> {
    let mut kv = BTreeMap::new();
    for line in text.lines() {
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| Error::Data(format!("meta line without '=': {line}")))?;
        kv.insert(k.trim().to_string(), v.trim().to_string());
    }
    let get = |k: &str| {
        kv.get(k)
            .ok_or_else(|| Error::Data(format!("meta.txt is missing key {k}")))
    };
    let parse_u = |k: &str| -> Result<usize> {
        get(k)?
            .parse()
            .map_err(|_| Error::Data(format!("meta key {k} is not an integer")))
    };
    let parse_f = |k: &str| -> Result<f64> {
        get(k)?
            .parse()
            .map_err(|_| Error::Data(format!("meta key {k} is not a number")))
    };
    Ok(DatasetMeta {
        classes: parse_u("classes")?,
        size: parse_u("size")?,
        seed: get("seed")?
            .parse()
            .map_err(|_| Error::Data("meta key seed is not an integer".into()))?,
        n_source: parse_u("n_source")?,
        n_target: parse_u("n_target")?,
        n_val: parse_u("n_val")?,
        gap: GapParams {
            color_shift: parse_f("gap_color_shift")?,
            gamma: parse_f("gap_gamma")?,
            noise: parse_f("gap_noise")?,
            class_skew: parse_f("gap_class_skew")?,
        },
    })
}

/// Writes `images/<id>.ppm`, `labels/<id>.pgm`, `manifest.txt` and
/// `meta.txt` under `dir`.
pub fn save_dataset(dir: &Path, ds: &Dataset) -> Result<()> {
    fs::create_dir_all(dir.join("images"))?;
    fs::create_dir_all(dir.join("labels"))?;
    let mut manifest = String::new();
    for (set, role) in [
        (&ds.source, "source"),
        (&ds.target_pool, "target"),
        (&ds.val, "val"),
    ] {
        for item in &set.items {
            let s = item.size;
            write_ppm(
                &dir.join(format!("images/{}.ppm", item.id)),
                s,
                s,
                &item.image,
            )?;
            if let Some(label) = &item.label {
                write_pgm(&dir.join(format!("labels/{}.pgm", item.id)), s, s, label)?;
            }
            manifest.push_str(&format!("{} {role}\n", item.id));
        }
    }
    fs::write(dir.join("manifest.txt"), manifest)?;
    fs::write(dir.join("meta.txt"), meta_to_text(&ds.meta))?;
    Ok(())
}

/// Loads a dataset directory written by [`save_dataset`].
pub fn load_dataset(dir: &Path) -> Result<Dataset> {
    let meta = meta_from_text(&fs::read_to_string(dir.join("meta.txt"))?)?;
    let manifest = fs::read_to_string(dir.join("manifest.txt"))?;
    let mut source = Vec::new();
    let mut target = Vec::new();
    let mut val = Vec::new();
    for line in manifest.lines() {
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        let (id, role) = line
            .split_once(' ')
            .ok_or_else(|| Error::Data(format!("manifest line without role: {line}")))?;
        let (w, h, image) = read_ppm(&dir.join(format!("images/{id}.ppm")))?;
        if w != h || w != meta.size {
            return Err(Error::Data(format!(
                "image {id} is {w}x{h}, dataset size is {}",
                meta.size
            )));
        }
        let label_path = dir.join(format!("labels/{id}.pgm"));
        let label = if label_path.exists() {
            let (lw, lh, values) = read_pgm(&label_path)?;
            if lw != w || lh != h {
                return Err(Error::Data(format!("label {id} does not match its image")));
            }
            Some(values)
        } else {
            None
        };
        let item = LabeledImage {
            id: id.to_string(),
            size: w,
            image,
            label,
        };
        match role {
            "source" => source.push(item),
            "target" => target.push(item),
            "val" => val.push(item),
            other => {
                return Err(Error::Data(format!("unknown manifest role {other}")));
            }
        }
    }
    Ok(Dataset {
        meta,
        source: SampleSet {
            role: Role::Source,
            items: source,
        },
        target_pool: SampleSet {
            role: Role::TargetLabeled,
            items: target,
        },
        val: SampleSet {
            role: Role::TargetLabeled,
            items: val,
        },
    })
}

// ---------------------------------------------------------------------------
// Batch sampling
// ---------------------------------------------------------------------------

/// Items per stream in one mixed batch.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct BatchCounts {
    pub source: usize,
    pub target_labeled: usize,
    pub unlabeled: usize,
}

impl Default for BatchCounts {
    fn default() -> Self {
        BatchCounts {
            source: 2,
            target_labeled: 2,
            unlabeled: 2,
        }
    }
}

/// One drawn sample, already cropped/flipped.
#[derive(Debug, Clone)]
pub struct BatchItem {
    pub id: String,
    pub set_index: usize,
    pub image: Vec<f32>,
    pub label: Option<Vec<u8>>,
}

/// One mixed minibatch.
#[derive(Debug, Clone)]
pub struct Batch {
    pub source: Vec<BatchItem>,
    pub target_labeled: Vec<BatchItem>,
    pub target_unlabeled: Vec<BatchItem>,
    pub size: usize,
}

struct Cursor {
    order: Vec<usize>,
    pos: usize,
    rng: ChaCha8Rng,
}

impl Cursor {
    fn new(n: usize, mut rng: ChaCha8Rng) -> Cursor {
        let mut order: Vec<usize> = (0..n).collect();
        order.shuffle(&mut rng);
        Cursor { order, pos: 0, rng }
    }

    fn next(&mut self) -> usize {
        if self.pos == self.order.len() {
            self.order.shuffle(&mut self.rng);
            self.pos = 0;
        }
        let i = self.order[self.pos];
        self.pos += 1;
        i
    }
}

/// Mirrors an image horizontally (channel-major square layout).
pub fn flip_image_chw(image: &[f32], size: usize) -> Vec<f32> {
    let plane = size * size;
    let mut out = vec![0.0f32; image.len()];
    for c in 0..image.len() / plane {
        for y in 0..size {
            for x in 0..size {
                out[c * plane + y * size + x] = image[c * plane + y * size + (size - 1 - x)];
            }
        }
    }
    out
}

/// Mirrors a label map horizontally.
pub fn flip_label(label: &[u8], size: usize) -> Vec<u8> {
    let mut out = vec![0u8; label.len()];
    for y in 0..size {
        for x in 0..size {
            out[y * size + x] = label[y * size + (size - 1 - x)];
        }
    }
    out
}

/// Draws mixed batches via per-set shuffled cursors (uniform coverage within
/// each pass, sampling with replacement across passes). The square crop at
/// this resolution equals the full image, so augmentation at batch time is
/// the horizontal flip (p = 0.5), applied jointly to image and label.
pub struct BatchSampler {
    source: Option<Cursor>,
    labeled: Option<Cursor>,
    unlabeled: Option<Cursor>,
    flip_rng: ChaCha8Rng,
}

impl BatchSampler {
    /// `*_len` are the sizes of the sets that will be passed to
    /// [`BatchSampler::next_batch`]; zero-length sets get no cursor.
    pub fn new(seed: u64, source_len: usize, labeled_len: usize, unlabeled_len: usize) -> Self {
        let cur = |tag: &str, n: usize| {
            (n > 0).then(|| Cursor::new(n, derive_rng(seed, &format!("sampler/{tag}"))))
        };
        BatchSampler {
            source: cur("source", source_len),
            labeled: cur("labeled", labeled_len),
            unlabeled: cur("unlabeled", unlabeled_len),
            flip_rng: derive_rng(seed, "sampler/flip"),
        }
    }

    fn draw(
        &mut self,
        which: &str,
        set: Option<&SampleSet>,
        count: usize,
    ) -> Result<Vec<BatchItem>> {
        if count == 0 {
            return Ok(Vec::new());
        }
        let (cursor, set) = match which {
            "source" => (&mut self.source, set),
            "target_labeled" => (&mut self.labeled, set),
            _ => (&mut self.unlabeled, set),
        };
        let (Some(cursor), Some(set)) = (cursor.as_mut(), set.filter(|s| !s.is_empty())) else {
            return Err(Error::Config(format!(
                "batch needs {count} items from the {which} set, but it is empty"
            )));
        };
        let mut items = Vec::with_capacity(count);
        for _ in 0..count {
            let idx = cursor.next();
            let item = &set.items[idx];
            let flip = self.flip_rng.gen::<f64>() < 0.5;
            let (image, label) = if flip {
                (
                    flip_image_chw(&item.image, item.size),
                    item.label.as_deref().map(|l| flip_label(l, item.size)),
                )
            } else {
                (item.image.clone(), item.label.clone())
            };
            items.push(BatchItem {
                id: item.id.clone(),
                set_index: idx,
                image,
                label,
            });
        }
        Ok(items)
    }

    /// Assembles the next batch; a positive count with an empty/absent set is
    /// a configuration error.
    pub fn next_batch(
        &mut self,
        source: Option<&SampleSet>,
        target_labeled: Option<&SampleSet>,
        target_unlabeled: Option<&SampleSet>,
        counts: &BatchCounts,
    ) -> Result<Batch> {
        let size = [source, target_labeled, target_unlabeled]
            .iter()
            .flatten()
            .find_map(|s| s.size())
            .ok_or_else(|| Error::Config("all batch sets are empty".into()))?;
        Ok(Batch {
            source: self.draw("source", source, counts.source)?,
            target_labeled: self.draw("target_labeled", target_labeled, counts.target_labeled)?,
            target_unlabeled: self.draw("target_unlabeled", target_unlabeled, counts.unlabeled)?,
            size,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny_gap() -> GapParams {
        GapParams {
            color_shift: 0.15,
            gamma: 0.5,
            noise: 0.05,
            class_skew: 0.8,
        }
    }

    fn img_hash(set: &SampleSet) -> u64 {
        let mut h: u64 = 0xcbf29ce484222325;
        let mut eat = |b: u8| {
            h ^= b as u64;
            h = h.wrapping_mul(0x100000001b3);
        };
        for item in &set.items {
            for v in &item.image {
                for b in v.to_bits().to_le_bytes() {
                    eat(b);
                }
            }
            if let Some(l) = &item.label {
                for &b in l {
                    eat(b);
                }
            }
        }
        h
    }

    #[test]
    fn generation_is_deterministic_per_seed() {
        let gap = tiny_gap();
        let (s1, t1) = generate_domains(3, 4, 4, 16, 5, &gap).unwrap();
        let (s2, t2) = generate_domains(3, 4, 4, 16, 5, &gap).unwrap();
        let (s3, _) = generate_domains(4, 4, 4, 16, 5, &gap).unwrap();
        assert_eq!(img_hash(&s1), img_hash(&s2));
        assert_eq!(img_hash(&t1), img_hash(&t2));
        assert_ne!(img_hash(&s1), img_hash(&s3));
    }

    #[test]
    fn labels_in_range_and_images_quantized() {
        let (s, t) = generate_domains(1, 3, 3, 16, 5, &tiny_gap()).unwrap();
        for set in [&s, &t] {
            for item in &set.items {
                for &l in item.label.as_ref().unwrap() {
                    assert!(l < 5);
                }
                for &v in &item.image {
                    assert!((0.0..=1.0).contains(&v));
                    let steps = v * 255.0;
                    assert!((steps - steps.round()).abs() < 1e-4);
                }
            }
        }
    }

    #[test]
    fn zero_gap_domains_share_statistics() {
        // with no gap the target renderer runs the source pipeline, so class
        // frequencies converge to the same values
        let (s, t) = generate_domains(5, 60, 60, 16, 5, &GapParams::default()).unwrap();
        let fs = class_frequencies(&s, 5).unwrap();
        let ft = class_frequencies(&t, 5).unwrap();
        for c in 0..5 {
            assert!(
                (fs[c] - ft[c]).abs() < 0.05,
                "class {c}: {:.3} vs {:.3}",
                fs[c],
                ft[c]
            );
        }
    }

    #[test]
    fn class_skew_shifts_shape_frequencies() {
        let skewed = GapParams {
            class_skew: 2.0,
            ..GapParams::default()
        };
        let (_, t) = generate_domains(6, 0, 80, 16, 5, &skewed).unwrap();
        let f = class_frequencies(&t, 5).unwrap();
        // class 4 is favored over class 2 by the skew
        assert!(f[4] > f[2], "skewed frequencies: {f:?}");
    }

    #[test]
    fn split_is_disjoint_partition() {
        let (_, pool) = generate_domains(7, 0, 10, 16, 5, &GapParams::default()).unwrap();
        let (dt, du) = split_target(&pool, 4, 11).unwrap();
        assert_eq!(dt.len(), 4);
        assert_eq!(du.len(), 6);
        assert!(dt.items.iter().all(|i| i.label.is_some()));
        assert!(du.items.iter().all(|i| i.label.is_none()));
        let mut ids: Vec<&str> = dt
            .items
            .iter()
            .chain(&du.items)
            .map(|i| i.id.as_str())
            .collect();
        ids.sort_unstable();
        let mut pool_ids: Vec<&str> = pool.items.iter().map(|i| i.id.as_str()).collect();
        pool_ids.sort_unstable();
        assert_eq!(ids, pool_ids);

        // edge sizes
        let (dt0, du0) = split_target(&pool, 0, 1).unwrap();
        assert!(dt0.is_empty() && du0.len() == 10);
        let (dt_all, du_all) = split_target(&pool, 10, 1).unwrap();
        assert!(dt_all.len() == 10 && du_all.is_empty());
        assert!(split_target(&pool, 11, 1).is_err());
    }

    #[test]
    fn split_membership_depends_on_seed() {
        let (_, pool) = generate_domains(7, 0, 40, 16, 5, &GapParams::default()).unwrap();
        let (a, _) = split_target(&pool, 10, 1).unwrap();
        let (b, _) = split_target(&pool, 10, 2).unwrap();
        let ids = |s: &SampleSet| s.items.iter().map(|i| i.id.clone()).collect::<Vec<_>>();
        assert_ne!(ids(&a), ids(&b));
    }

    fn one_label_image(label: Vec<u8>, size: usize) -> SampleSet {
        SampleSet {
            role: Role::TargetLabeled,
            items: vec![LabeledImage {
                id: "x".into(),
                size,
                image: vec![0.0; 3 * size * size],
                label: Some(label),
            }],
        }
    }

    #[test]
    fn frequencies_hand_cases() {
        let all_zero = one_label_image(vec![0; 16], 4);
        assert_eq!(
            class_frequencies(&all_zero, 3).unwrap(),
            vec![1.0, 0.0, 0.0]
        );

        // 4 ignored, remaining 12 split 8:4
        let mut l = vec![0u8; 16];
        for v in l.iter_mut().take(4) {
            *v = IGNORE_LABEL;
        }
        for v in l.iter_mut().skip(12) {
            *v = 1;
        }
        let f = class_frequencies(&one_label_image(l, 4), 2).unwrap();
        assert!((f[0] - 2.0 / 3.0).abs() < 1e-12);
        assert!((f[1] - 1.0 / 3.0).abs() < 1e-12);
        assert!((f.iter().sum::<f64>() - 1.0).abs() < 1e-9);

        let ignored = one_label_image(vec![IGNORE_LABEL; 16], 4);
        assert!(matches!(
            class_frequencies(&ignored, 2),
            Err(Error::EmptySet(_))
        ));
        let bad = one_label_image(vec![7; 16], 4);
        assert!(matches!(class_frequencies(&bad, 2), Err(Error::Data(_))));
    }

    #[test]
    fn pnm_roundtrip_is_exact() {
        let dir = tempfile::tempdir().unwrap();
        let (_, pool) = generate_domains(9, 0, 1, 8, 5, &GapParams::default()).unwrap();
        let item = &pool.items[0];
        let ppm = dir.path().join("x.ppm");
        write_ppm(&ppm, 8, 8, &item.image).unwrap();
        let (w, h, image) = read_ppm(&ppm).unwrap();
        assert_eq!((w, h), (8, 8));
        assert_eq!(image, item.image);

        let pgm = dir.path().join("x.pgm");
        let label = item.label.clone().unwrap();
        write_pgm(&pgm, 8, 8, &label).unwrap();
        assert_eq!(read_pgm(&pgm).unwrap().2, label);
    }

    #[test]
    fn pnm_parser_handles_comments_and_rejects_garbage() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c.pgm");
        let mut bytes = b"P5\n# a comment\n2 2\n255\n".to_vec();
        bytes.extend_from_slice(&[1, 2, 3, 4]);
        std::fs::write(&path, bytes).unwrap();
        assert_eq!(read_pgm(&path).unwrap(), (2, 2, vec![1, 2, 3, 4]));

        std::fs::write(&path, b"JUNK").unwrap();
        assert!(read_pgm(&path).is_err());
    }

    #[test]
    fn dataset_directory_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let meta = DatasetMeta {
            classes: 5,
            size: 16,
            seed: 12,
            n_source: 3,
            n_target: 4,
            n_val: 2,
            gap: tiny_gap(),
        };
        let ds = Dataset::generate(meta.clone()).unwrap();
        save_dataset(dir.path(), &ds).unwrap();
        let loaded = load_dataset(dir.path()).unwrap();
        assert_eq!(loaded.meta, meta);
        assert_eq!(img_hash(&loaded.source), img_hash(&ds.source));
        assert_eq!(img_hash(&loaded.target_pool), img_hash(&ds.target_pool));
        assert_eq!(img_hash(&loaded.val), img_hash(&ds.val));
    }

    #[test]
    fn sampler_sequence_is_deterministic() {
        let (s, pool) = generate_domains(13, 5, 6, 8, 5, &GapParams::default()).unwrap();
        let (dt, du) = split_target(&pool, 3, 1).unwrap();
        let run = || {
            let mut smp = BatchSampler::new(21, s.len(), dt.len(), du.len());
            let mut ids = Vec::new();
            for _ in 0..10 {
                let b = smp
                    .next_batch(Some(&s), Some(&dt), Some(&du), &BatchCounts::default())
                    .unwrap();
                for it in b
                    .source
                    .iter()
                    .chain(&b.target_labeled)
                    .chain(&b.target_unlabeled)
                {
                    ids.push(it.id.clone());
                }
            }
            ids
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn sampler_covers_sets_uniformly() {
        let (s, _) = generate_domains(14, 5, 0, 8, 5, &GapParams::default()).unwrap();
        let mut smp = BatchSampler::new(3, s.len(), 0, 0);
        let counts_cfg = BatchCounts {
            source: 2,
            target_labeled: 0,
            unlabeled: 0,
        };
        let mut counts = vec![0usize; s.len()];
        let draws = 10_000;
        for _ in 0..draws {
            let b = smp.next_batch(Some(&s), None, None, &counts_cfg).unwrap();
            for it in &b.source {
                counts[it.set_index] += 1;
            }
        }
        let expect = (draws * 2) as f64 / s.len() as f64;
        for (i, &c) in counts.iter().enumerate() {
            assert!(
                (c as f64 - expect).abs() / expect < 0.2,
                "item {i} drawn {c} times, expected about {expect}"
            );
        }
    }

    #[test]
    fn sampler_rejects_missing_required_set() {
        let (s, _) = generate_domains(15, 2, 0, 8, 5, &GapParams::default()).unwrap();
        let mut smp = BatchSampler::new(3, s.len(), 0, 0);
        let err = smp
            .next_batch(Some(&s), None, None, &BatchCounts::default())
            .unwrap_err();
        assert!(matches!(err, Error::Config(_)));
        assert!(err.to_string().contains("target_labeled"));
    }

    #[test]
    fn flips_apply_jointly_to_image_and_label() {
        // asymmetric 2x2 image: left column bright, right column dark
        let size = 2;
        let image = vec![
            1.0, 0.0, 1.0, 0.0, // R
            1.0, 0.0, 1.0, 0.0, // G
            1.0, 0.0, 1.0, 0.0, // B
        ];
        let label = vec![2, 3, 2, 3];
        let set = SampleSet {
            role: Role::TargetLabeled,
            items: vec![LabeledImage {
                id: "a".into(),
                size,
                image,
                label: Some(label),
            }],
        };
        let counts = BatchCounts {
            source: 0,
            target_labeled: 1,
            unlabeled: 0,
        };
        let mut smp = BatchSampler::new(5, 0, 1, 0);
        let mut saw_flip = false;
        let mut saw_plain = false;
        for _ in 0..64 {
            let b = smp.next_batch(None, Some(&set), None, &counts).unwrap();
            let it = &b.target_labeled[0];
            let l = it.label.as_ref().unwrap();
            if l[0] == 3 {
                saw_flip = true;
                assert_eq!(it.image[0], 0.0, "image must flip with the label");
            } else {
                saw_plain = true;
                assert_eq!(it.image[0], 1.0);
            }
        }
        assert!(saw_flip && saw_plain, "both orientations should occur");
    }
}

//! Stochastic strong augmentation (color jitter, Gaussian blur, a
//! RandAugment subset, CutMix) and LAB-statistics restyling.
//!
//! Every transform here is color-only or a hard region paste: geometric
//! warps are deliberately excluded so a prediction made on the weak view
//! stays pixel-aligned with the strong view everywhere outside the CutMix
//! box. The per-op semantics follow PIL: enhancement factors blend toward a
//! degenerate image (black, grayscale, mean gray, smoothed) with factor 1 as
//! the identity, and posterize/solarize/equalize operate on the 8-bit
//! quantization of the [0,1] values.

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};

/// The RandAugment operation subset.
pub const RANDAUGMENT_OPS: [&str; 7] = [
    "brightness",
    "color",
    "contrast",
    "equalize",
    "posterize",
    "sharpness",
    "solarize",
];

/// CutMix box aspect ratio (width/height) range.
const CUTMIX_ASPECT: (f64, f64) = (0.5, 2.0);

/// Strong-augmentation pipeline parameters. Factors are PIL enhancement
/// factors (1 = identity); probabilities gate whole stages.
#[derive(Debug, Clone, PartialEq)]
pub struct AugConfig {
    pub p_jitter: f64,
    pub p_blur: f64,
    pub p_randaug: f64,
    pub p_cutmix: f64,
    /// Jitter half-widths: factors are drawn from 1 ± delta.
    pub jitter_brightness: f64,
    pub jitter_contrast: f64,
    pub jitter_saturation: f64,
    /// Hue rotation half-width in turns.
    pub jitter_hue: f64,
    pub blur_sigma: (f64, f64),
    /// CutMix pasted-area fraction range.
    pub cutmix_area: (f64, f64),
    /// Magnitude range for the factor-based RandAugment ops.
    pub enhance_range: (f64, f64),
    /// Bits kept by posterize.
    pub posterize_bits: (u32, u32),
    /// Solarize threshold range.
    pub solarize_range: (f64, f64),
}

impl Default for AugConfig {
    fn default() -> Self {
        AugConfig {
            p_jitter: 0.8,
            p_blur: 0.5,
            p_randaug: 1.0,
            p_cutmix: 1.0,
            jitter_brightness: 0.25,
            jitter_contrast: 0.25,
            jitter_saturation: 0.25,
            jitter_hue: 0.05,
            blur_sigma: (0.1, 1.0),
            cutmix_area: (0.2, 0.5),
            enhance_range: (0.6, 1.4),
            posterize_bits: (5, 8),
            solarize_range: (0.9, 1.0),
        }
    }
}

impl AugConfig {
    pub fn validate(&self) -> Result<()> {
        for (name, p) in [
            ("p_jitter", self.p_jitter),
            ("p_blur", self.p_blur),
            ("p_randaug", self.p_randaug),
            ("p_cutmix", self.p_cutmix),
        ] {
            if !(0.0..=1.0).contains(&p) {
                return Err(Error::Config(format!("{name} must be in [0,1], got {p}")));
            }
        }
        let (lo, hi) = self.cutmix_area;
        if !(0.0 < lo && lo <= hi && hi < 1.0) {
            return Err(Error::Config(format!(
                "cutmix area range ({lo}, {hi}) must lie inside (0,1)"
            )));
        }
        if self.blur_sigma.0 <= 0.0 || self.blur_sigma.0 > self.blur_sigma.1 {
            return Err(Error::Config("blur sigma range must be positive".into()));
        }
        if self.posterize_bits.0 < 1 || self.posterize_bits.1 > 8 {
            return Err(Error::Config(
                "posterize bits must stay within 1..=8".into(),
            ));
        }
        Ok(())
    }

    /// Disables every stochastic stage; useful as a no-op baseline.
    pub fn disabled() -> Self {
        AugConfig {
            p_jitter: 0.0,
            p_blur: 0.0,
            p_randaug: 0.0,
            p_cutmix: 0.0,
            ..AugConfig::default()
        }
    }
}

fn plane(size: usize) -> usize {
    size * size
}

fn clamp01(image: &mut [f32]) {
    for v in image.iter_mut() {
        *v = v.clamp(0.0, 1.0);
    }
}

fn luma(image: &[f32], px: usize, n: usize) -> f32 {
    0.299 * image[px] + 0.587 * image[n + px] + 0.114 * image[2 * n + px]
}

/// Blend toward black; PIL Brightness.
fn apply_brightness(image: &mut [f32], factor: f32) {
    for v in image.iter_mut() {
        *v *= factor;
    }
}

/// Blend toward the per-pixel grayscale; PIL Color (saturation).
fn apply_color(image: &mut [f32], size: usize, factor: f32) {
    let n = plane(size);
    for px in 0..n {
        let g = luma(image, px, n);
        for c in 0..3 {
            let v = &mut image[c * n + px];
            *v = g + (*v - g) * factor;
        }
    }
}

/// Blend toward the mean gray level; PIL Contrast.
fn apply_contrast(image: &mut [f32], size: usize, factor: f32) {
    let n = plane(size);
    let mean = (0..n).map(|px| luma(image, px, n) as f64).sum::<f64>() / n as f64;
    let mean = mean as f32;
    for v in image.iter_mut() {
        *v = mean + (*v - mean) * factor;
    }
}

/// Blend toward a 3x3-smoothed copy (border rows/columns untouched, like
/// PIL's SMOOTH filter); PIL Sharpness.
fn apply_sharpness(image: &mut [f32], size: usize, factor: f32) {
    if size < 3 {
        return;
    }
    let n = plane(size);
    let src = image.to_vec();
    for c in 0..3 {
        let ch = &src[c * n..(c + 1) * n];
        for y in 1..size - 1 {
            for x in 1..size - 1 {
                let mut acc = 0.0f32;
                for dy in 0..3 {
                    for dx in 0..3 {
                        let w = if dx == 1 && dy == 1 { 5.0 } else { 1.0 };
                        acc += w * ch[(y + dy - 1) * size + (x + dx - 1)];
                    }
                }
                let smooth = acc / 13.0;
                let orig = ch[y * size + x];
                image[c * n + y * size + x] = smooth + (orig - smooth) * factor;
            }
        }
    }
}

/// Rotates hue by `delta` turns through HSV.
fn apply_hue(image: &mut [f32], size: usize, delta: f32) {
    let n = plane(size);
    for px in 0..n {
        let (r, g, b) = (image[px], image[n + px], image[2 * n + px]);
        let max = r.max(g).max(b);
        let min = r.min(g).min(b);
        let v = max;
        let d = max - min;
        if d <= 0.0 {
            continue;
        }
        let s = d / max.max(1e-12);
        let h = if max == r {
            ((g - b) / d).rem_euclid(6.0)
        } else if max == g {
            (b - r) / d + 2.0
        } else {
            (r - g) / d + 4.0
        } / 6.0;
        let h = (h + delta).rem_euclid(1.0) * 6.0;
        let i = h.floor() as i32 % 6;
        let f = h - h.floor();
        let p = v * (1.0 - s);
        let q = v * (1.0 - s * f);
        let t = v * (1.0 - s * (1.0 - f));
        let (r, g, b) = match i {
            0 => (v, t, p),
            1 => (q, v, p),
            2 => (p, v, t),
            3 => (p, q, v),
            4 => (t, p, v),
            _ => (v, p, q),
        };
        image[px] = r;
        image[n + px] = g;
        image[2 * n + px] = b;
    }
}

/// Separable Gaussian blur with replicate edges. A constant image is a
/// fixed point (the kernel is normalized).
pub fn gaussian_blur(image: &[f32], size: usize, sigma: f64) -> Vec<f32> {
    let radius = (2.5 * sigma).ceil().max(1.0) as usize;
    let mut kernel = Vec::with_capacity(2 * radius + 1);
    for i in 0..=2 * radius {
        let d = i as f64 - radius as f64;
        kernel.push((-0.5 * d * d / (sigma * sigma)).exp());
    }
    let norm: f64 = kernel.iter().sum();
    let kernel: Vec<f32> = kernel.iter().map(|k| (k / norm) as f32).collect();

    let n = plane(size);
    let channels = image.len() / n;
    let at = |i: isize| i.clamp(0, size as isize - 1) as usize;
    let mut tmp = vec![0.0f32; image.len()];
    for c in 0..channels {
        for y in 0..size {
            for x in 0..size {
                let mut acc = 0.0;
                for (i, k) in kernel.iter().enumerate() {
                    let sx = at(x as isize + i as isize - radius as isize);
                    acc += k * image[c * n + y * size + sx];
                }
                tmp[c * n + y * size + x] = acc;
            }
        }
    }
    let mut out = vec![0.0f32; image.len()];
    for c in 0..channels {
        for y in 0..size {
            for x in 0..size {
                let mut acc = 0.0;
                for (i, k) in kernel.iter().enumerate() {
                    let sy = at(y as isize + i as isize - radius as isize);
                    acc += k * tmp[c * n + sy * size + x];
                }
                out[c * n + y * size + x] = acc;
            }
        }
    }
    out
}

fn to_u8(v: f32) -> usize {
    (v.clamp(0.0, 1.0) * 255.0).round() as usize
}

/// Keeps the top `bits` bits of each 8-bit value; 8 bits is the identity on
/// 8-bit-quantized input.
fn apply_posterize(image: &mut [f32], bits: u32) {
    let mask = !(0xffu32 >> bits) & 0xff;
    for v in image.iter_mut() {
        *v = (to_u8(*v) as u32 & mask) as f32 / 255.0;
    }
}

/// Inverts every value at or above the threshold.
fn apply_solarize(image: &mut [f32], threshold: f32) {
    for v in image.iter_mut() {
        if *v >= threshold {
            *v = 1.0 - *v;
        }
    }
}

/// Per-channel histogram equalization over the 8-bit quantization, using
/// PIL's lookup-table construction.
fn apply_equalize(image: &mut [f32], size: usize) {
    let n = plane(size);
    for c in 0..3 {
        let ch = &mut image[c * n..(c + 1) * n];
        let mut histo = [0u64; 256];
        for v in ch.iter() {
            histo[to_u8(*v)] += 1;
        }
        let nonzero: Vec<u64> = histo.iter().copied().filter(|&h| h > 0).collect();
        if nonzero.len() <= 1 {
            continue;
        }
        let step = (nonzero.iter().sum::<u64>() - nonzero.last().unwrap()) / 255;
        if step == 0 {
            continue;
        }
        let mut lut = [0u8; 256];
        let mut acc = step / 2;
        for (i, l) in lut.iter_mut().enumerate() {
            *l = (acc / step).min(255) as u8;
            acc += histo[i];
        }
        for v in ch.iter_mut() {
            *v = lut[to_u8(*v)] as f32 / 255.0;
        }
    }
}

/// Applies one named RandAugment operation. Factor-based ops treat
/// `magnitude` as the PIL enhancement factor; posterize rounds it to a bit
/// count and solarize reads it as the inversion threshold; equalize ignores
/// it.
pub fn randaugment_op(name: &str, magnitude: f64, image: &[f32], size: usize) -> Result<Vec<f32>> {
    if image.len() != 3 * plane(size) {
        return Err(Error::Argument("image buffer does not match size".into()));
    }
    let mut out = image.to_vec();
    match name {
        "brightness" => apply_brightness(&mut out, magnitude as f32),
        "color" => apply_color(&mut out, size, magnitude as f32),
        "contrast" => apply_contrast(&mut out, size, magnitude as f32),
        "equalize" => apply_equalize(&mut out, size),
        "posterize" => apply_posterize(&mut out, magnitude.round().clamp(1.0, 8.0) as u32),
        "sharpness" => apply_sharpness(&mut out, size, magnitude as f32),
        "solarize" => apply_solarize(&mut out, magnitude as f32),
        other => {
            return Err(Error::Argument(format!(
                "unknown augmentation op {other:?}"
            )))
        }
    }
    clamp01(&mut out);
    Ok(out)
}

/// Hard-pastes an axis-aligned box from `x2` into `x1`.
///
/// The box has area `area_frac * H * W` and width/height ratio `aspect`,
/// centered at `center` (pixel coordinates) and clipped to bounds; when it
/// fits unclipped its pixel count is exactly the rounded box area. Returns
/// the mixed image and the pasted-pixel mask, which the caller must also
/// apply to the images' targets.
pub fn cutmix(
    x1: &[f32],
    x2: &[f32],
    size: usize,
    area_frac: f64,
    aspect: f64,
    center: (f64, f64),
) -> Result<(Vec<f32>, Vec<bool>)> {
    let n = plane(size);
    if x1.len() != x2.len() || x1.len() != 3 * n {
        return Err(Error::Argument(
            "cutmix images must share dimensions".into(),
        ));
    }
    let mut out = x1.to_vec();
    let mut mask = vec![false; n];
    let area = area_frac.clamp(0.0, 1.0) * n as f64;
    if area < 0.5 {
        return Ok((out, mask));
    }
    let w = (area * aspect).sqrt().round().clamp(1.0, size as f64) as usize;
    let h = ((area / w as f64).round() as usize).clamp(1, size);
    let x_lo = (center.0 - w as f64 / 2.0).round().max(0.0) as usize;
    let y_lo = (center.1 - h as f64 / 2.0).round().max(0.0) as usize;
    let x_hi = (x_lo + w).min(size);
    let y_hi = (y_lo + h).min(size);
    for y in y_lo..y_hi {
        for x in x_lo..x_hi {
            let px = y * size + x;
            mask[px] = true;
            for c in 0..3 {
                out[c * n + px] = x2[c * n + px];
            }
        }
    }
    Ok((out, mask))
}

/// The full strong-augmentation pipeline: color jitter, Gaussian blur, one
/// RandAugment op, then CutMix with `partner`, in that order, each gated by
/// its configured probability. Inputs are untouched; the returned mask marks
/// pixels taken from the partner.
pub fn strong_augment(
    image: &[f32],
    partner: &[f32],
    size: usize,
    config: &AugConfig,
    rng: &mut ChaCha8Rng,
) -> Result<(Vec<f32>, Vec<bool>)> {
    let n = plane(size);
    if image.len() != 3 * n || partner.len() != 3 * n {
        return Err(Error::Argument(
            "strong_augment images must both be 3-channel and match size".into(),
        ));
    }
    let mut out = image.to_vec();

    if rng.gen::<f64>() < config.p_jitter {
        let factor = |rng: &mut ChaCha8Rng, delta: f64| {
            (1.0 + (rng.gen::<f64>() * 2.0 - 1.0) * delta) as f32
        };
        apply_brightness(&mut out, factor(rng, config.jitter_brightness));
        apply_contrast(&mut out, size, factor(rng, config.jitter_contrast));
        apply_color(&mut out, size, factor(rng, config.jitter_saturation));
        let hue = (rng.gen::<f64>() * 2.0 - 1.0) * config.jitter_hue;
        clamp01(&mut out);
        apply_hue(&mut out, size, hue as f32);
    }

    if rng.gen::<f64>() < config.p_blur {
        let (lo, hi) = config.blur_sigma;
        let sigma = lo + rng.gen::<f64>() * (hi - lo);
        out = gaussian_blur(&out, size, sigma);
    }

    if rng.gen::<f64>() < config.p_randaug {
        let name = RANDAUGMENT_OPS[rng.gen_range(0..RANDAUGMENT_OPS.len())];
        let magnitude = match name {
            "posterize" => rng.gen_range(config.posterize_bits.0..=config.posterize_bits.1) as f64,
            "solarize" => {
                let (lo, hi) = config.solarize_range;
                lo + rng.gen::<f64>() * (hi - lo)
            }
            "equalize" => 0.0,
            _ => {
                let (lo, hi) = config.enhance_range;
                lo + rng.gen::<f64>() * (hi - lo)
            }
        };
        clamp01(&mut out);
        out = randaugment_op(name, magnitude, &out, size)?;
    }

    let mut mask = vec![false; n];
    if rng.gen::<f64>() < config.p_cutmix {
        let (lo, hi) = config.cutmix_area;
        let area_frac = lo + rng.gen::<f64>() * (hi - lo);
        let aspect = CUTMIX_ASPECT.0 + rng.gen::<f64>() * (CUTMIX_ASPECT.1 - CUTMIX_ASPECT.0);
        // box dimensions first, then a center that keeps the box inside
        // bounds, so the pasted area never shrinks by clipping
        let area = area_frac * n as f64;
        let w = (area * aspect).sqrt().round().clamp(1.0, size as f64) as usize;
        let h = ((area / w as f64).round() as usize).clamp(1, size);
        let x_lo = rng.gen_range(0..=size - w);
        let y_lo = rng.gen_range(0..=size - h);
        let center = (x_lo as f64 + w as f64 / 2.0, y_lo as f64 + h as f64 / 2.0);
        let (mixed, m) = cutmix(&out, partner, size, area_frac, aspect, center)?;
        out = mixed;
        mask = m;
    }

    clamp01(&mut out);
    Ok((out, mask))
}

// ---------------------------------------------------------------------------
// LAB restyling
// ---------------------------------------------------------------------------

/// Per-channel mean and standard deviation of an image in CIELAB.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LabStats {
    pub mean: [f64; 3],
    pub std: [f64; 3],
}

fn srgb_to_linear(v: f64) -> f64 {
    if v <= 0.04045 {
        v / 12.92
    } else {
        ((v + 0.055) / 1.055).powf(2.4)
    }
}

fn linear_to_srgb(v: f64) -> f64 {
    if v <= 0.003_130_8 {
        12.92 * v
    } else {
        1.055 * v.powf(1.0 / 2.4) - 0.055
    }
}

/// D65 white point.
const WHITE: [f64; 3] = [0.950_47, 1.0, 1.088_83];

fn lab_f(t: f64) -> f64 {
    const DELTA: f64 = 6.0 / 29.0;
    if t > DELTA * DELTA * DELTA {
        t.cbrt()
    } else {
        t / (3.0 * DELTA * DELTA) + 4.0 / 29.0
    }
}

fn lab_f_inv(f: f64) -> f64 {
    const DELTA: f64 = 6.0 / 29.0;
    if f > DELTA {
        f * f * f
    } else {
        3.0 * DELTA * DELTA * (f - 4.0 / 29.0)
    }
}

fn rgb_to_lab(r: f64, g: f64, b: f64) -> [f64; 3] {
    let (r, g, b) = (srgb_to_linear(r), srgb_to_linear(g), srgb_to_linear(b));
    let x = 0.412_456_4 * r + 0.357_576_1 * g + 0.180_437_5 * b;
    let y = 0.212_672_9 * r + 0.715_152_2 * g + 0.072_175_0 * b;
    let z = 0.019_333_9 * r + 0.119_192_0 * g + 0.950_304_1 * b;
    let fx = lab_f(x / WHITE[0]);
    let fy = lab_f(y / WHITE[1]);
    let fz = lab_f(z / WHITE[2]);
    [116.0 * fy - 16.0, 500.0 * (fx - fy), 200.0 * (fy - fz)]
}

fn lab_to_rgb(l: f64, a: f64, b: f64) -> [f64; 3] {
    let fy = (l + 16.0) / 116.0;
    let fx = fy + a / 500.0;
    let fz = fy - b / 200.0;
    let x = WHITE[0] * lab_f_inv(fx);
    let y = WHITE[1] * lab_f_inv(fy);
    let z = WHITE[2] * lab_f_inv(fz);
    let r = 3.240_454_2 * x - 1.537_138_5 * y - 0.498_531_4 * z;
    let g = -0.969_266_0 * x + 1.876_010_8 * y + 0.041_556_0 * z;
    let bb = 0.055_643_4 * x - 0.204_025_9 * y + 1.057_225_2 * z;
    [
        linear_to_srgb(r.max(0.0)),
        linear_to_srgb(g.max(0.0)),
        linear_to_srgb(bb.max(0.0)),
    ]
}

fn image_to_lab(image: &[f32], size: usize) -> Vec<[f64; 3]> {
    let n = plane(size);
    (0..n)
        .map(|px| {
            rgb_to_lab(
                image[px] as f64,
                image[n + px] as f64,
                image[2 * n + px] as f64,
            )
        })
        .collect()
}

/// LAB channel statistics of an RGB image.
pub fn lab_stats(image: &[f32], size: usize) -> LabStats {
    let lab = image_to_lab(image, size);
    let n = lab.len() as f64;
    let mut mean = [0.0; 3];
    for px in &lab {
        for c in 0..3 {
            mean[c] += px[c];
        }
    }
    for m in mean.iter_mut() {
        *m /= n;
    }
    let mut var = [0.0; 3];
    for px in &lab {
        for c in 0..3 {
            let d = px[c] - mean[c];
            var[c] += d * d;
        }
    }
    let mut std = [0.0; 3];
    for c in 0..3 {
        std[c] = (var[c] / n).sqrt();
    }
    LabStats { mean, std }
}

/// Re-colors `source` so its per-channel LAB statistics match `target`:
/// each channel is standardized with the source stats and re-affined with
/// the target's, then converted back to RGB and clamped.
pub fn lab_style(source: &[f32], target: &[f32], size: usize) -> Result<Vec<f32>> {
    let n = plane(size);
    if source.len() != 3 * n || target.len() != 3 * n {
        return Err(Error::Argument("lab_style images must match size".into()));
    }
    const EPS: f64 = 1e-6;
    let src_lab = image_to_lab(source, size);
    let s = lab_stats(source, size);
    let t = lab_stats(target, size);
    let mut out = vec![0.0f32; 3 * n];
    for (px, lab) in src_lab.iter().enumerate() {
        let mut styled = [0.0; 3];
        for c in 0..3 {
            styled[c] = (lab[c] - s.mean[c]) / (s.std[c] + EPS) * t.std[c] + t.mean[c];
        }
        let rgb = lab_to_rgb(styled[0], styled[1], styled[2]);
        for c in 0..3 {
            out[c * n + px] = rgb[c].clamp(0.0, 1.0) as f32;
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{generate_domains, GapParams};
    use crate::rng::derive_rng;

    fn sample_image(seed: u64, size: usize) -> Vec<f32> {
        let (s, _) = generate_domains(seed, 1, 0, size, 5, &GapParams::default()).unwrap();
        s.items[0].image.clone()
    }

    fn max_abs_diff(a: &[f32], b: &[f32]) -> f32 {
        a.iter()
            .zip(b)
            .map(|(x, y)| (x - y).abs())
            .fold(0.0, f32::max)
    }

    #[test]
    fn disabled_pipeline_is_identity() {
        let img = sample_image(1, 16);
        let partner = sample_image(2, 16);
        let mut rng = derive_rng(0, "aug");
        let (out, mask) =
            strong_augment(&img, &partner, 16, &AugConfig::disabled(), &mut rng).unwrap();
        assert_eq!(out, img);
        assert!(mask.iter().all(|&m| !m));
    }

    #[test]
    fn pipeline_is_deterministic_and_pure() {
        let img = sample_image(3, 16);
        let partner = sample_image(4, 16);
        let (img_copy, partner_copy) = (img.clone(), partner.clone());
        let cfg = AugConfig::default();
        let run = |seed| {
            let mut rng = derive_rng(seed, "aug");
            strong_augment(&img, &partner, 16, &cfg, &mut rng).unwrap()
        };
        let (a, ma) = run(7);
        let (b, mb) = run(7);
        let (c, _) = run(8);
        assert_eq!(a, b);
        assert_eq!(ma, mb);
        assert_ne!(a, c, "different streams should differ");
        assert_eq!(img, img_copy, "input must not be mutated");
        assert_eq!(partner, partner_copy);
    }

    #[test]
    fn outputs_stay_in_unit_range() {
        let img = sample_image(5, 16);
        let partner = sample_image(6, 16);
        let cfg = AugConfig::default();
        for seed in 0..50 {
            let mut rng = derive_rng(seed, "aug");
            let (out, _) = strong_augment(&img, &partner, 16, &cfg, &mut rng).unwrap();
            assert!(out.iter().all(|v| (0.0..=1.0).contains(v)));
        }
    }

    #[test]
    fn cutmix_exact_box_when_unclipped() {
        let size = 32;
        let x1 = vec![0.0f32; 3 * size * size];
        let x2 = vec![1.0f32; 3 * size * size];
        let (out, mask) = cutmix(&x1, &x2, size, 0.25, 1.0, (16.0, 16.0)).unwrap();
        let count = mask.iter().filter(|&&m| m).count();
        assert_eq!(count, 256, "16x16 box expected");
        // hard paste: values come from exactly one input
        for px in 0..size * size {
            let expect = if mask[px] { 1.0 } else { 0.0 };
            for c in 0..3 {
                assert_eq!(out[c * size * size + px], expect);
            }
        }
    }

    #[test]
    fn cutmix_degenerate_boxes() {
        let size = 8;
        let x1 = sample_image(9, size);
        let x2 = sample_image(10, size);
        let (out, mask) = cutmix(&x1, &x2, size, 0.0, 1.0, (4.0, 4.0)).unwrap();
        assert_eq!(out, x1);
        assert!(mask.iter().all(|&m| !m));
        let (out, mask) = cutmix(&x1, &x2, size, 1.0, 1.0, (4.0, 4.0)).unwrap();
        assert_eq!(out, x2);
        assert!(mask.iter().all(|&m| m));
    }

    #[test]
    fn strong_augment_mask_fraction_tracks_area_range() {
        let size = 32;
        let img = sample_image(11, size);
        let partner = sample_image(12, size);
        let cfg = AugConfig::default();
        let (lo, hi) = cfg.cutmix_area;
        for seed in 0..200 {
            let mut rng = derive_rng(seed, "area");
            let (_, mask) = strong_augment(&img, &partner, size, &cfg, &mut rng).unwrap();
            let frac = mask.iter().filter(|&&m| m).count() as f64 / (size * size) as f64;
            assert!(
                frac >= lo * 0.95 && frac <= hi * 1.05,
                "mask fraction {frac} outside [{}, {}]",
                lo * 0.95,
                hi * 1.05
            );
        }
    }

    #[test]
    fn randaugment_identity_points() {
        let img = sample_image(13, 16);
        let out = randaugment_op("brightness", 1.0, &img, 16).unwrap();
        assert_eq!(out, img);
        // the generator quantizes to 8 bits, so full-depth posterize is a no-op
        let out = randaugment_op("posterize", 8.0, &img, 16).unwrap();
        assert_eq!(out, img);
        let out = randaugment_op("solarize", 0.0, &img, 16).unwrap();
        for (o, i) in out.iter().zip(&img) {
            assert!((o + i - 1.0).abs() < 1e-6, "threshold 0 inverts everything");
        }
        assert!(matches!(
            randaugment_op("rotate", 1.0, &img, 16),
            Err(Error::Argument(_))
        ));
    }

    #[test]
    fn randaugment_ops_preserve_unit_range() {
        let img = sample_image(14, 16);
        for name in RANDAUGMENT_OPS {
            for &m in &[0.6, 1.0, 1.4, 4.0] {
                let out = randaugment_op(name, m, &img, 16).unwrap();
                assert!(
                    out.iter().all(|v| (0.0..=1.0).contains(v)),
                    "{name} left the unit range"
                );
            }
        }
    }

    #[test]
    fn blur_keeps_constant_images_fixed() {
        let img = vec![0.37f32; 3 * 16 * 16];
        let out = gaussian_blur(&img, 16, 1.3);
        assert!(max_abs_diff(&img, &out) < 1e-5);
    }

    #[test]
    fn lab_style_self_is_identity() {
        let img = sample_image(15, 16);
        let out = lab_style(&img, &img, 16).unwrap();
        assert!(
            max_abs_diff(&img, &out) <= 1e-3,
            "self-styling drifted by {}",
            max_abs_diff(&img, &out)
        );
    }

    #[test]
    fn lab_style_constant_source_adopts_target_means() {
        let size = 16;
        let source = vec![0.5f32; 3 * size * size];
        let target = sample_image(16, size);
        let out = lab_style(&source, &target, size).unwrap();
        assert!(out.iter().all(|v| v.is_finite()));
        let got = lab_stats(&out, size);
        let want = lab_stats(&target, size);
        for c in 0..3 {
            assert!(
                (got.mean[c] - want.mean[c]).abs() < 0.5,
                "channel {c}: mean {} vs {}",
                got.mean[c],
                want.mean[c]
            );
        }
    }

    #[test]
    fn lab_style_matches_gray_target_statistics() {
        let size = 16;
        let n = size * size;
        // gray ramps: source brighter, target darker
        let mut source = vec![0.0f32; 3 * n];
        let mut target = vec![0.0f32; 3 * n];
        for px in 0..n {
            let s = 0.5 + 0.3 * (px as f32 / n as f32);
            let t = 0.2 + 0.15 * (px as f32 / n as f32);
            for c in 0..3 {
                source[c * n + px] = s;
                target[c * n + px] = t;
            }
        }
        let out = lab_style(&source, &target, size).unwrap();
        let got = lab_stats(&out, size);
        let want = lab_stats(&target, size);
        assert!((got.mean[0] - want.mean[0]).abs() < 1e-3);
        assert!((got.std[0] - want.std[0]).abs() < 1e-3);
    }

    #[test]
    fn config_validation_rejects_bad_ranges() {
        let mut cfg = AugConfig::default();
        cfg.p_blur = 1.5;
        assert!(cfg.validate().is_err());
        let mut cfg = AugConfig::default();
        cfg.cutmix_area = (0.0, 0.5);
        assert!(cfg.validate().is_err());
        assert!(AugConfig::default().validate().is_ok());
    }
}

//! Differentiable operations. Each op computes its forward value eagerly and
//! registers a closure producing per-parent gradients from the output
//! gradient.
//!
//! Conventions: tensors are row-major; `conv2d` is cross-correlation (no
//! kernel flip); image tensors are `[batch, channel, height, width]`.

use super::Tensor;
use crate::error::{Error, Result};
use crate::scalar::Scalar;

fn check_same_shape<S: Scalar>(ctx: &str, a: &Tensor<S>, b: &Tensor<S>) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::shape(ctx, a.shape(), b.shape()));
    }
    Ok(())
}

/// Elementwise sum of two same-shaped tensors.
pub fn add<S: Scalar>(a: &Tensor<S>, b: &Tensor<S>) -> Result<Tensor<S>> {
    check_same_shape("add", a, b)?;
    let data = a
        .data()
        .iter()
        .zip(b.data().iter())
        .map(|(&x, &y)| x + y)
        .collect();
    Ok(Tensor::from_op(
        a.shape().to_vec(),
        data,
        vec![a.clone(), b.clone()],
        |g| vec![Some(g.to_vec()), Some(g.to_vec())],
    ))
}

/// Elementwise product of two same-shaped tensors.
pub fn mul<S: Scalar>(a: &Tensor<S>, b: &Tensor<S>) -> Result<Tensor<S>> {
    check_same_shape("mul", a, b)?;
    let a_data = a.data_vec();
    let b_data = b.data_vec();
    let data = a_data.iter().zip(&b_data).map(|(&x, &y)| x * y).collect();
    Ok(Tensor::from_op(
        a.shape().to_vec(),
        data,
        vec![a.clone(), b.clone()],
        move |g| {
            let da = g.iter().zip(&b_data).map(|(&gv, &bv)| gv * bv).collect();
            let db = g.iter().zip(&a_data).map(|(&gv, &av)| gv * av).collect();
            vec![Some(da), Some(db)]
        },
    ))
}

/// Multiplication by a compile-time constant factor.
pub fn scale<S: Scalar>(a: &Tensor<S>, k: S) -> Tensor<S> {
    let data = a.data().iter().map(|&x| x * k).collect();
    Tensor::from_op(a.shape().to_vec(), data, vec![a.clone()], move |g| {
        vec![Some(g.iter().map(|&gv| gv * k).collect())]
    })
}

/// Sum of all elements, producing a scalar.
pub fn sum<S: Scalar>(a: &Tensor<S>) -> Tensor<S> {
    let total = a.data().iter().fold(S::zero(), |acc, &x| acc + x);
    let n = a.numel();
    Tensor::from_op(vec![], vec![total], vec![a.clone()], move |g| {
        vec![Some(vec![g[0]; n])]
    })
}

/// Arithmetic mean of all elements, producing a scalar.
pub fn mean<S: Scalar>(a: &Tensor<S>) -> Tensor<S> {
    let n = a.numel().max(1);
    let inv = S::cast(1.0 / n as f64);
    let total = a.data().iter().fold(S::zero(), |acc, &x| acc + x);
    Tensor::from_op(vec![], vec![total * inv], vec![a.clone()], move |g| {
        vec![Some(vec![g[0] * inv; n])]
    })
}

/// Rectified linear unit; the subgradient at zero is taken as zero.
pub fn relu<S: Scalar>(a: &Tensor<S>) -> Tensor<S> {
    let x = a.data_vec();
    let data = x
        .iter()
        .map(|&v| if v > S::zero() { v } else { S::zero() })
        .collect();
    Tensor::from_op(a.shape().to_vec(), data, vec![a.clone()], move |g| {
        let dx = g
            .iter()
            .zip(&x)
            .map(|(&gv, &xv)| if xv > S::zero() { gv } else { S::zero() })
            .collect();
        vec![Some(dx)]
    })
}

/// Splits a shape at `axis` into (outer, lane, inner) extents for lane-wise
/// iteration.
fn lane_geometry(shape: &[usize], axis: usize) -> Result<(usize, usize, usize)> {
    if axis >= shape.len() {
        return Err(Error::Argument(format!(
            "axis {axis} out of range for shape {shape:?}"
        )));
    }
    let outer: usize = shape[..axis].iter().product();
    let lane = shape[axis];
    let inner: usize = shape[axis + 1..].iter().product();
    Ok((outer, lane, inner))
}

/// Softmax along `axis`, stabilized by max subtraction.
pub fn softmax<S: Scalar>(a: &Tensor<S>, axis: usize) -> Result<Tensor<S>> {
    let (outer, lane, inner) = lane_geometry(a.shape(), axis)?;
    let x = a.data();
    if x.iter().any(|v| !v.is_finite()) {
        return Err(Error::Numeric(
            "softmax input contains a non-finite value".into(),
        ));
    }
    let mut y = vec![S::zero(); x.len()];
    for o in 0..outer {
        for i in 0..inner {
            let base = o * lane * inner + i;
            let mut max = x[base];
            for j in 1..lane {
                let v = x[base + j * inner];
                if v > max {
                    max = v;
                }
            }
            let mut total = S::zero();
            for j in 0..lane {
                let e = (x[base + j * inner] - max).exp();
                y[base + j * inner] = e;
                total = total + e;
            }
            let inv = S::one() / total;
            for j in 0..lane {
                y[base + j * inner] = y[base + j * inner] * inv;
            }
        }
    }
    drop(x);
    let y_saved = y.clone();
    Ok(Tensor::from_op(
        a.shape().to_vec(),
        y,
        vec![a.clone()],
        move |g| {
            let mut dx = vec![S::zero(); g.len()];
            for o in 0..outer {
                for i in 0..inner {
                    let base = o * lane * inner + i;
                    let mut dot = S::zero();
                    for j in 0..lane {
                        let k = base + j * inner;
                        dot = dot + g[k] * y_saved[k];
                    }
                    for j in 0..lane {
                        let k = base + j * inner;
                        dx[k] = y_saved[k] * (g[k] - dot);
                    }
                }
            }
            vec![Some(dx)]
        },
    ))
}

/// Normalizes each lane along `axis` to unit Euclidean norm. Lanes whose norm
/// does not exceed `eps` are divided by `eps` instead, so the zero vector maps
/// to zero.
pub fn l2_normalize<S: Scalar>(a: &Tensor<S>, axis: usize, eps: f64) -> Result<Tensor<S>> {
    let (outer, lane, inner) = lane_geometry(a.shape(), axis)?;
    let eps = S::cast(eps);
    let x = a.data_vec();
    let mut y = vec![S::zero(); x.len()];
    let mut norms = vec![S::zero(); outer * inner];
    for o in 0..outer {
        for i in 0..inner {
            let base = o * lane * inner + i;
            let mut sq = S::zero();
            for j in 0..lane {
                let v = x[base + j * inner];
                sq = sq + v * v;
            }
            let n = sq.sqrt();
            norms[o * inner + i] = n;
            let denom = if n > eps { n } else { eps };
            let inv = S::one() / denom;
            for j in 0..lane {
                y[base + j * inner] = x[base + j * inner] * inv;
            }
        }
    }
    let y_saved = y.clone();
    Ok(Tensor::from_op(
        a.shape().to_vec(),
        y,
        vec![a.clone()],
        move |g| {
            let mut dx = vec![S::zero(); g.len()];
            for o in 0..outer {
                for i in 0..inner {
                    let base = o * lane * inner + i;
                    let n = norms[o * inner + i];
                    if n > eps {
                        let mut dot = S::zero();
                        for j in 0..lane {
                            let k = base + j * inner;
                            dot = dot + g[k] * y_saved[k];
                        }
                        let inv = S::one() / n;
                        for j in 0..lane {
                            let k = base + j * inner;
                            dx[k] = (g[k] - y_saved[k] * dot) * inv;
                        }
                    } else {
                        let inv = S::one() / eps;
                        for j in 0..lane {
                            let k = base + j * inner;
                            dx[k] = g[k] * inv;
                        }
                    }
                }
            }
            vec![Some(dx)]
        },
    ))
}

/// Source coordinate for half-pixel-centers bilinear resampling: low index,
/// high index and the high-side weight.
fn bilinear_axis_map(out_dim: usize, in_dim: usize) -> Vec<(usize, usize, f64)> {
    let scale = in_dim as f64 / out_dim as f64;
    (0..out_dim)
        .map(|o| {
            let src = ((o as f64 + 0.5) * scale - 0.5).max(0.0);
            let lo = (src.floor() as usize).min(in_dim - 1);
            let hi = (lo + 1).min(in_dim - 1);
            (lo, hi, src - lo as f64)
        })
        .collect()
}

/// Bilinear resampling of a `[batch, channel, height, width]` tensor to
/// `(out_h, out_w)`, using half-pixel centers.
pub fn bilinear_upsample<S: Scalar>(
    a: &Tensor<S>,
    out_h: usize,
    out_w: usize,
) -> Result<Tensor<S>> {
    let shape = a.shape();
    if shape.len() != 4 {
        return Err(Error::Argument(format!(
            "bilinear_upsample expects a rank-4 tensor, got shape {shape:?}"
        )));
    }
    if out_h == 0 || out_w == 0 {
        return Err(Error::Argument(
            "bilinear_upsample output dims must be positive".into(),
        ));
    }
    let (bsz, ch, h, w) = (shape[0], shape[1], shape[2], shape[3]);
    let ymap = bilinear_axis_map(out_h, h);
    let xmap = bilinear_axis_map(out_w, w);
    let x = a.data();
    let mut out = vec![S::zero(); bsz * ch * out_h * out_w];
    for plane in 0..bsz * ch {
        let in_base = plane * h * w;
        let out_base = plane * out_h * out_w;
        for (oy, &(y0, y1, fy)) in ymap.iter().enumerate() {
            let wy1 = S::cast(fy);
            let wy0 = S::one() - wy1;
            let r0 = in_base + y0 * w;
            let r1 = in_base + y1 * w;
            let orow = out_base + oy * out_w;
            for (ox, &(x0, x1, fx)) in xmap.iter().enumerate() {
                let wx1 = S::cast(fx);
                let wx0 = S::one() - wx1;
                let top = x[r0 + x0] * wx0 + x[r0 + x1] * wx1;
                let bot = x[r1 + x0] * wx0 + x[r1 + x1] * wx1;
                out[orow + ox] = top * wy0 + bot * wy1;
            }
        }
    }
    drop(x);
    let in_shape = (bsz, ch, h, w);
    Ok(Tensor::from_op(
        vec![bsz, ch, out_h, out_w],
        out,
        vec![a.clone()],
        move |g| {
            let (bsz, ch, h, w) = in_shape;
            let mut dx = vec![S::zero(); bsz * ch * h * w];
            for plane in 0..bsz * ch {
                let in_base = plane * h * w;
                let out_base = plane * out_h * out_w;
                for (oy, &(y0, y1, fy)) in ymap.iter().enumerate() {
                    let wy1 = S::cast(fy);
                    let wy0 = S::one() - wy1;
                    let r0 = in_base + y0 * w;
                    let r1 = in_base + y1 * w;
                    let orow = out_base + oy * out_w;
                    for (ox, &(x0, x1, fx)) in xmap.iter().enumerate() {
                        let wx1 = S::cast(fx);
                        let wx0 = S::one() - wx1;
                        let gv = g[orow + ox];
                        dx[r0 + x0] = dx[r0 + x0] + gv * wy0 * wx0;
                        dx[r0 + x1] = dx[r0 + x1] + gv * wy0 * wx1;
                        dx[r1 + x0] = dx[r1 + x0] + gv * wy1 * wx0;
                        dx[r1 + x1] = dx[r1 + x1] + gv * wy1 * wx1;
                    }
                }
            }
            vec![Some(dx)]
        },
    ))
}

fn div_floor_i(a: i64, b: i64) -> i64 {
    debug_assert!(b > 0);
    if a >= 0 {
        a / b
    } else {
        -((-a + b - 1) / b)
    }
}

fn div_ceil_i(a: i64, b: i64) -> i64 {
    debug_assert!(b > 0);
    if a >= 0 {
        (a + b - 1) / b
    } else {
        a / b
    }
}

/// Range of output positions `o` whose input index `o*stride + k*dil - pad`
/// lands inside `[0, in_dim)`.
#[inline]
fn conv_out_range(
    in_dim: usize,
    pad: usize,
    stride: usize,
    dil: usize,
    k: usize,
    out_dim: usize,
) -> (usize, usize) {
    let s = stride as i64;
    let off = (k * dil) as i64 - pad as i64;
    let lo = div_ceil_i(-off, s).max(0);
    let hi = (div_floor_i(in_dim as i64 - 1 - off, s) + 1).min(out_dim as i64);
    if hi <= lo {
        (0, 0)
    } else {
        (lo as usize, hi as usize)
    }
}

#[derive(Clone, Copy)]
struct ConvDims {
    bsz: usize,
    cin: usize,
    h: usize,
    w: usize,
    cout: usize,
    kh: usize,
    kw: usize,
    oh: usize,
    ow: usize,
    stride: usize,
    pad: usize,
    dil: usize,
}

/// 2-D cross-correlation with symmetric zero padding, optional bias.
///
/// Input `[batch, c_in, h, w]`, weight `[c_out, c_in, kh, kw]`, bias
/// `[c_out]`; output `[batch, c_out, oh, ow]` with
/// `oh = (h + 2*pad - dil*(kh-1) - 1) / stride + 1`.
pub fn conv2d<S: Scalar>(
    x: &Tensor<S>,
    weight: &Tensor<S>,
    bias: Option<&Tensor<S>>,
    stride: usize,
    padding: usize,
    dilation: usize,
) -> Result<Tensor<S>> {
    let xs = x.shape();
    let ws = weight.shape();
    if xs.len() != 4 || ws.len() != 4 {
        return Err(Error::shape("conv2d rank", xs, ws));
    }
    if xs[1] != ws[1] {
        return Err(Error::shape("conv2d input channels", xs, ws));
    }
    if stride == 0 || dilation == 0 {
        return Err(Error::Argument(
            "conv2d stride and dilation must be positive".into(),
        ));
    }
    let d = ConvDims {
        bsz: xs[0],
        cin: xs[1],
        h: xs[2],
        w: xs[3],
        cout: ws[0],
        kh: ws[2],
        kw: ws[3],
        oh: 0,
        ow: 0,
        stride,
        pad: padding,
        dil: dilation,
    };
    let eff_kh = dilation * (d.kh - 1) + 1;
    let eff_kw = dilation * (d.kw - 1) + 1;
    if d.h + 2 * padding < eff_kh || d.w + 2 * padding < eff_kw {
        return Err(Error::Config(format!(
            "conv2d kernel {}x{} (dilation {dilation}) does not fit input {}x{} with padding {padding}",
            d.kh, d.kw, d.h, d.w
        )));
    }
    let d = ConvDims {
        oh: (d.h + 2 * padding - eff_kh) / stride + 1,
        ow: (d.w + 2 * padding - eff_kw) / stride + 1,
        ..d
    };
    if let Some(b) = bias {
        if b.shape() != [d.cout] {
            return Err(Error::shape("conv2d bias", b.shape(), &[d.cout]));
        }
    }

    let x_data = x.data_vec();
    let w_data = weight.data_vec();
    let mut out = vec![S::zero(); d.bsz * d.cout * d.oh * d.ow];
    if let Some(b) = bias {
        let bd = b.data();
        for bi in 0..d.bsz {
            for co in 0..d.cout {
                let base = (bi * d.cout + co) * d.oh * d.ow;
                out[base..base + d.oh * d.ow].fill(bd[co]);
            }
        }
    }
    conv_forward_into(&d, &x_data, &w_data, &mut out);

    let x_needs = x.requires_grad();
    let w_needs = weight.requires_grad();
    let b_needs = bias.map(|b| b.requires_grad()).unwrap_or(false);
    let mut parents = vec![x.clone(), weight.clone()];
    if let Some(b) = bias {
        parents.push(b.clone());
    }
    let has_bias = bias.is_some();
    Ok(Tensor::from_op(
        vec![d.bsz, d.cout, d.oh, d.ow],
        out,
        parents,
        move |g| {
            let dx = x_needs.then(|| conv_backward_input(&d, &w_data, g));
            let dw = w_needs.then(|| conv_backward_weight(&d, &x_data, g));
            let mut grads = vec![dx, dw];
            if has_bias {
                grads.push(b_needs.then(|| conv_backward_bias(&d, g)));
            }
            grads
        },
    ))
}

impl ConvDims {
    /// Rows of the unrolled patch matrix: one per (channel, ky, kx).
    fn kdim(&self) -> usize {
        self.cin * self.kh * self.kw
    }

    /// Columns of the unrolled patch matrix: one per output position.
    fn pdim(&self) -> usize {
        self.oh * self.ow
    }

    /// A 1x1/stride-1/no-padding conv reads the image verbatim, so the
    /// image itself can serve as the patch matrix.
    fn is_identity_patch(&self) -> bool {
        self.kh == 1 && self.kw == 1 && self.stride == 1 && self.pad == 0
    }
}

/// Unrolls one image `[cin, h, w]` into the patch matrix `col` of shape
/// `[kdim, pdim]`, row k = (ci, ky, kx), column = output position. Writes
/// every slot: positions reading padding become zero, so `col` may hold
/// garbage on entry.
fn im2col<S: Scalar>(d: &ConvDims, x: &[S], col: &mut [S]) {
    let p = d.pdim();
    let mut k = 0;
    for ci in 0..d.cin {
        let x_base = ci * d.h * d.w;
        for ky in 0..d.kh {
            let (oy_lo, oy_hi) = conv_out_range(d.h, d.pad, d.stride, d.dil, ky, d.oh);
            for kx in 0..d.kw {
                let (ox_lo, ox_hi) = conv_out_range(d.w, d.pad, d.stride, d.dil, kx, d.ow);
                let row = &mut col[k * p..(k + 1) * p];
                row[..oy_lo * d.ow].fill(S::zero());
                row[oy_hi * d.ow..].fill(S::zero());
                for oy in oy_lo..oy_hi {
                    let out_row = &mut row[oy * d.ow..(oy + 1) * d.ow];
                    out_row[..ox_lo].fill(S::zero());
                    out_row[ox_hi..].fill(S::zero());
                    if ox_lo >= ox_hi {
                        continue;
                    }
                    let iy = oy * d.stride + ky * d.dil - d.pad;
                    let src = x_base + iy * d.w;
                    let dst = &mut out_row[ox_lo..ox_hi];
                    if d.stride == 1 {
                        let ix0 = src + ox_lo + kx * d.dil - d.pad;
                        dst.copy_from_slice(&x[ix0..ix0 + dst.len()]);
                    } else {
                        for (j, o) in dst.iter_mut().enumerate() {
                            let ix = (ox_lo + j) * d.stride + kx * d.dil - d.pad;
                            *o = x[src + ix];
                        }
                    }
                }
                k += 1;
            }
        }
    }
}

/// Scatter-adds a patch-matrix gradient back onto one image gradient.
fn col2im_add<S: Scalar>(d: &ConvDims, dcol: &[S], dx: &mut [S]) {
    let p = d.pdim();
    let mut k = 0;
    for ci in 0..d.cin {
        let x_base = ci * d.h * d.w;
        for ky in 0..d.kh {
            let (oy_lo, oy_hi) = conv_out_range(d.h, d.pad, d.stride, d.dil, ky, d.oh);
            for kx in 0..d.kw {
                let (ox_lo, ox_hi) = conv_out_range(d.w, d.pad, d.stride, d.dil, kx, d.ow);
                if ox_lo < ox_hi {
                    let row = &dcol[k * p..(k + 1) * p];
                    for oy in oy_lo..oy_hi {
                        let iy = oy * d.stride + ky * d.dil - d.pad;
                        let dst_base = x_base + iy * d.w;
                        let src = &row[oy * d.ow + ox_lo..oy * d.ow + ox_hi];
                        if d.stride == 1 {
                            let ix0 = dst_base + ox_lo + kx * d.dil - d.pad;
                            let dst = &mut dx[ix0..ix0 + src.len()];
                            for (o, &v) in dst.iter_mut().zip(src) {
                                *o = *o + v;
                            }
                        } else {
                            for (j, &v) in src.iter().enumerate() {
                                let ix = (ox_lo + j) * d.stride + kx * d.dil - d.pad;
                                dx[dst_base + ix] = dx[dst_base + ix] + v;
                            }
                        }
                    }
                }
                k += 1;
            }
        }
    }
}

fn conv_forward_into<S: Scalar>(d: &ConvDims, x: &[S], w: &[S], out: &mut [S]) {
    let (kdim, p) = (d.kdim(), d.pdim());
    let img = d.cin * d.h * d.w;
    let mut col = if d.is_identity_patch() {
        Vec::new()
    } else {
        vec![S::zero(); kdim * p]
    };
    for bi in 0..d.bsz {
        let patches: &[S] = if d.is_identity_patch() {
            &x[bi * img..(bi + 1) * img]
        } else {
            im2col(d, &x[bi * img..(bi + 1) * img], &mut col);
            &col
        };
        for co in 0..d.cout {
            let out_row = &mut out[(bi * d.cout + co) * p..(bi * d.cout + co + 1) * p];
            for (k, &wv) in w[co * kdim..(co + 1) * kdim].iter().enumerate() {
                let src = &patches[k * p..(k + 1) * p];
                for (o, &v) in out_row.iter_mut().zip(src) {
                    *o = *o + wv * v;
                }
            }
        }
    }
}

fn conv_backward_input<S: Scalar>(d: &ConvDims, w: &[S], g: &[S]) -> Vec<S> {
    let (kdim, p) = (d.kdim(), d.pdim());
    let img = d.cin * d.h * d.w;
    let mut dx = vec![S::zero(); d.bsz * img];
    let mut dcol = vec![S::zero(); kdim * p];
    for bi in 0..d.bsz {
        for co in 0..d.cout {
            let g_row = &g[(bi * d.cout + co) * p..(bi * d.cout + co + 1) * p];
            for (k, &wv) in w[co * kdim..(co + 1) * kdim].iter().enumerate() {
                let dst = &mut dcol[k * p..(k + 1) * p];
                if co == 0 {
                    for (o, &gv) in dst.iter_mut().zip(g_row) {
                        *o = wv * gv;
                    }
                } else {
                    for (o, &gv) in dst.iter_mut().zip(g_row) {
                        *o = *o + wv * gv;
                    }
                }
            }
        }
        col2im_add(d, &dcol, &mut dx[bi * img..(bi + 1) * img]);
    }
    dx
}

fn conv_backward_weight<S: Scalar>(d: &ConvDims, x: &[S], g: &[S]) -> Vec<S> {
    let (kdim, p) = (d.kdim(), d.pdim());
    let img = d.cin * d.h * d.w;
    let mut dw = vec![S::zero(); d.cout * kdim];
    let mut col = if d.is_identity_patch() {
        Vec::new()
    } else {
        vec![S::zero(); kdim * p]
    };
    for bi in 0..d.bsz {
        let patches: &[S] = if d.is_identity_patch() {
            &x[bi * img..(bi + 1) * img]
        } else {
            im2col(d, &x[bi * img..(bi + 1) * img], &mut col);
            &col
        };
        for co in 0..d.cout {
            let g_row = &g[(bi * d.cout + co) * p..(bi * d.cout + co + 1) * p];
            let dw_row = &mut dw[co * kdim..(co + 1) * kdim];
            for (k, dk) in dw_row.iter_mut().enumerate() {
                *dk = *dk + dot_lanes(g_row, &patches[k * p..(k + 1) * p]);
            }
        }
    }
    dw
}

/// Dot product with four independent accumulators; keeps the FP dependency
/// chain short enough to pipeline.
fn dot_lanes<S: Scalar>(a: &[S], b: &[S]) -> S {
    let mut acc = [S::zero(); 4];
    let mut ia = a.chunks_exact(4);
    let mut ib = b.chunks_exact(4);
    for (ca, cb) in ia.by_ref().zip(ib.by_ref()) {
        acc[0] = acc[0] + ca[0] * cb[0];
        acc[1] = acc[1] + ca[1] * cb[1];
        acc[2] = acc[2] + ca[2] * cb[2];
        acc[3] = acc[3] + ca[3] * cb[3];
    }
    let mut s = (acc[0] + acc[1]) + (acc[2] + acc[3]);
    for (&x, &y) in ia.remainder().iter().zip(ib.remainder()) {
        s = s + x * y;
    }
    s
}

fn conv_backward_bias<S: Scalar>(d: &ConvDims, g: &[S]) -> Vec<S> {
    let mut db = vec![S::zero(); d.cout];
    for bi in 0..d.bsz {
        for co in 0..d.cout {
            let base = (bi * d.cout + co) * d.oh * d.ow;
            let mut acc = S::zero();
            for &gv in &g[base..base + d.oh * d.ow] {
                acc = acc + gv;
            }
            db[co] = db[co] + acc;
        }
    }
    db
}

/// Per-channel batch normalization over `(batch, height, width)` of a rank-4
/// tensor, with affine transform.
///
/// `training == true` normalizes with biased batch statistics and, when
/// `update_stats` is also set, folds them into the running buffers with the
/// given momentum. `training == false` normalizes with the running buffers.
/// Gradients flow to `x`, `gamma` and `beta`; the running buffers stay
/// outside the graph.
#[allow(clippy::too_many_arguments)]
pub fn norm2d<S: Scalar>(
    x: &Tensor<S>,
    gamma: &Tensor<S>,
    beta: &Tensor<S>,
    running_mean: &Tensor<S>,
    running_var: &Tensor<S>,
    training: bool,
    update_stats: bool,
    eps: f64,
    momentum: f64,
) -> Result<Tensor<S>> {
    let xs = x.shape();
    if xs.len() != 4 {
        return Err(Error::Argument(format!(
            "norm2d expects a rank-4 tensor, got shape {xs:?}"
        )));
    }
    let (bsz, ch, h, w) = (xs[0], xs[1], xs[2], xs[3]);
    for (name, t) in [
        ("gamma", gamma),
        ("beta", beta),
        ("running_mean", running_mean),
        ("running_var", running_var),
    ] {
        if t.shape() != [ch] {
            return Err(Error::shape(&format!("norm2d {name}"), t.shape(), &[ch]));
        }
    }
    let n = bsz * h * w;
    if training && n <= 1 {
        return Err(Error::Config(
            "norm2d: degenerate statistics, training mode needs more than one value per channel"
                .into(),
        ));
    }

    let xd = x.data_vec();
    let plane = h * w;
    let mut mean_c = vec![S::zero(); ch];
    let mut inv_c = vec![S::zero(); ch];
    let eps_s = S::cast(eps);
    if training {
        let inv_n = S::cast(1.0 / n as f64);
        let mut var_c = vec![S::zero(); ch];
        for c in 0..ch {
            let mut total = S::zero();
            for bi in 0..bsz {
                let base = (bi * ch + c) * plane;
                for &v in &xd[base..base + plane] {
                    total = total + v;
                }
            }
            let mu = total * inv_n;
            let mut sq = S::zero();
            for bi in 0..bsz {
                let base = (bi * ch + c) * plane;
                for &v in &xd[base..base + plane] {
                    let dlt = v - mu;
                    sq = sq + dlt * dlt;
                }
            }
            mean_c[c] = mu;
            var_c[c] = sq * inv_n;
            inv_c[c] = S::one() / (var_c[c] + eps_s).sqrt();
        }
        if update_stats {
            let m = S::cast(momentum);
            let one_m = S::one() - m;
            let mut rm_all = running_mean.data_vec();
            let mut rv_all = running_var.data_vec();
            for c in 0..ch {
                rm_all[c] = one_m * rm_all[c] + m * mean_c[c];
                rv_all[c] = one_m * rv_all[c] + m * var_c[c];
            }
            running_mean.set_data(rm_all);
            running_var.set_data(rv_all);
        }
    } else {
        let rm = running_mean.data();
        let rv = running_var.data();
        for c in 0..ch {
            mean_c[c] = rm[c];
            inv_c[c] = S::one() / (rv[c] + eps_s).sqrt();
        }
    }

    let g_data = gamma.data_vec();
    let b_data = beta.data_vec();
    let mut xhat = vec![S::zero(); xd.len()];
    let mut out = vec![S::zero(); xd.len()];
    for bi in 0..bsz {
        for c in 0..ch {
            let base = (bi * ch + c) * plane;
            let mu = mean_c[c];
            let inv = inv_c[c];
            let gc = g_data[c];
            let bc = b_data[c];
            for i in base..base + plane {
                let xh = (xd[i] - mu) * inv;
                xhat[i] = xh;
                out[i] = gc * xh + bc;
            }
        }
    }

    let x_needs = x.requires_grad();
    Ok(Tensor::from_op(
        xs.to_vec(),
        out,
        vec![x.clone(), gamma.clone(), beta.clone()],
        move |g| {
            let mut dgamma = vec![S::zero(); ch];
            let mut dbeta = vec![S::zero(); ch];
            for bi in 0..bsz {
                for c in 0..ch {
                    let base = (bi * ch + c) * plane;
                    let mut sg = S::zero();
                    let mut sgx = S::zero();
                    for i in base..base + plane {
                        sg = sg + g[i];
                        sgx = sgx + g[i] * xhat[i];
                    }
                    dbeta[c] = dbeta[c] + sg;
                    dgamma[c] = dgamma[c] + sgx;
                }
            }
            let dx = x_needs.then(|| {
                let mut dx = vec![S::zero(); g.len()];
                if training {
                    let inv_n = S::cast(1.0 / n as f64);
                    for c in 0..ch {
                        // means of dL/dxhat and dL/dxhat * xhat over the channel
                        let m_g = dbeta[c] * inv_n;
                        let m_gx = dgamma[c] * inv_n;
                        let gc = g_data[c];
                        let inv = inv_c[c];
                        for bi in 0..bsz {
                            let base = (bi * ch + c) * plane;
                            for i in base..base + plane {
                                dx[i] = gc * inv * (g[i] - m_g - xhat[i] * m_gx);
                            }
                        }
                    }
                } else {
                    for bi in 0..bsz {
                        for c in 0..ch {
                            let base = (bi * ch + c) * plane;
                            let k = g_data[c] * inv_c[c];
                            for i in base..base + plane {
                                dx[i] = k * g[i];
                            }
                        }
                    }
                }
                dx
            });
            vec![dx, Some(dgamma), Some(dbeta)]
        },
    ))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], data: Vec<f64>) -> Tensor<f64> {
        Tensor::leaf(shape, data)
    }

    fn close(a: f64, b: f64, tol: f64) -> bool {
        (a - b).abs() <= tol
    }

    #[test]
    fn add_rejects_shape_mismatch() {
        let a = t(&[2], vec![1.0, 2.0]);
        let b = t(&[3], vec![1.0, 2.0, 3.0]);
        assert!(matches!(add(&a, &b), Err(Error::ShapeMismatch { .. })));
    }

    #[test]
    fn mean_of_known_values() {
        let a = t(&[4], vec![1.0, 2.0, 3.0, 6.0]);
        assert_eq!(mean(&a).item(), 3.0);
        assert_eq!(sum(&a).item(), 12.0);
    }

    #[test]
    fn relu_zeroes_negatives_and_their_grads() {
        let x = Tensor::<f64>::param(&[3], vec![-1.0, 0.0, 2.0]);
        let y = relu(&x);
        assert_eq!(*y.data(), vec![0.0, 0.0, 2.0]);
        sum(&y).backward().unwrap();
        assert_eq!(x.grad().unwrap(), vec![0.0, 0.0, 1.0]);
    }

    #[test]
    fn softmax_matches_closed_form_pair() {
        let x = t(&[2], vec![1.0, 0.0]);
        let y = softmax(&x, 0).unwrap();
        let d = y.data();
        assert!(close(d[0], 0.731058, 1e-6));
        assert!(close(d[1], 0.268941, 1e-6));
        assert!(close(d[0] + d[1], 1.0, 1e-12));
    }

    #[test]
    fn softmax_survives_large_logits() {
        let x = t(&[2], vec![1000.0, 0.0]);
        let y = softmax(&x, 0).unwrap();
        let d = y.data();
        assert!(close(d[0], 1.0, 1e-6));
        assert!(close(d[1], 0.0, 1e-6));
    }

    #[test]
    fn softmax_rejects_nan() {
        let x = t(&[2], vec![f64::NAN, 0.0]);
        assert!(matches!(softmax(&x, 0), Err(Error::Numeric(_))));
    }

    #[test]
    fn softmax_lane_axis_in_middle() {
        // [1, 2, 2]: softmax over axis 1 treats (0,1) columns independently
        let x = t(&[1, 2, 2], vec![1.0, 5.0, 1.0, 5.0]);
        let y = softmax(&x, 1).unwrap();
        let d = y.data();
        assert!(close(d[0] + d[2], 1.0, 1e-12));
        assert!(close(d[1] + d[3], 1.0, 1e-12));
        assert!(close(d[0], 0.5, 1e-12));
    }

    #[test]
    fn l2_normalize_three_four_five() {
        let x = t(&[2], vec![3.0, 4.0]);
        let y = l2_normalize(&x, 0, 1e-12).unwrap();
        let d = y.data();
        assert!(close(d[0], 0.6, 1e-12));
        assert!(close(d[1], 0.8, 1e-12));
    }

    #[test]
    fn l2_normalize_zero_vector_stays_zero() {
        let x = t(&[3], vec![0.0, 0.0, 0.0]);
        let y = l2_normalize(&x, 0, 1e-12).unwrap();
        assert_eq!(*y.data(), vec![0.0, 0.0, 0.0]);
    }

    #[test]
    fn conv_ones_kernel_box_sums() {
        // 3x3 input 1..9, 3x3 kernel of ones, stride 1, padding 1:
        // the center output is the full sum, the corner the 2x2 partial sum.
        let x = t(&[1, 1, 3, 3], (1..=9).map(f64::from).collect());
        let w = t(&[1, 1, 3, 3], vec![1.0; 9]);
        let y = conv2d(&x, &w, None, 1, 1, 1).unwrap();
        assert_eq!(y.shape(), &[1, 1, 3, 3]);
        let d = y.data();
        assert_eq!(d[4], 45.0);
        assert_eq!(d[0], 12.0);
    }

    #[test]
    fn conv_stride_and_dilation_shapes() {
        let x = t(&[1, 1, 8, 8], vec![1.0; 64]);
        let w = t(&[2, 1, 4, 4], vec![0.5; 32]);
        let y = conv2d(&x, &w, None, 4, 0, 1).unwrap();
        assert_eq!(y.shape(), &[1, 2, 2, 2]);
        assert_eq!(y.data()[0], 8.0);

        // dilation 2: effective kernel 5x5 on an 8x8 input, padding 2
        let w2 = t(&[1, 1, 3, 3], vec![1.0; 9]);
        let y2 = conv2d(&x, &w2, None, 1, 2, 2).unwrap();
        assert_eq!(y2.shape(), &[1, 1, 8, 8]);
        // interior pixel sees all nine taps
        assert_eq!(y2.data()[3 * 8 + 3], 9.0);
    }

    #[test]
    fn conv_bias_broadcasts_per_channel() {
        let x = t(&[1, 1, 2, 2], vec![0.0; 4]);
        let w = t(&[2, 1, 1, 1], vec![1.0, 1.0]);
        let b = t(&[2], vec![0.25, -0.5]);
        let y = conv2d(&x, &w, Some(&b), 1, 0, 1).unwrap();
        let d = y.data();
        assert_eq!(&d[0..4], &[0.25; 4]);
        assert_eq!(&d[4..8], &[-0.5; 4]);
    }

    #[test]
    fn conv_rejects_unfit_kernel() {
        let x = t(&[1, 1, 2, 2], vec![0.0; 4]);
        let w = t(&[1, 1, 5, 5], vec![0.0; 25]);
        assert!(matches!(
            conv2d(&x, &w, None, 1, 0, 1),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn conv_rejects_channel_mismatch() {
        let x = t(&[1, 2, 4, 4], vec![0.0; 32]);
        let w = t(&[1, 3, 3, 3], vec![0.0; 27]);
        assert!(matches!(
            conv2d(&x, &w, None, 1, 1, 1),
            Err(Error::ShapeMismatch { .. })
        ));
    }

    #[test]
    fn norm2d_two_values_normalize_symmetrically() {
        // values {1, 3}: mean 2, biased variance 1, so outputs are
        // -/+ 1/sqrt(1 + 1e-5)
        let x = t(&[1, 1, 1, 2], vec![1.0, 3.0]);
        let gamma = t(&[1], vec![1.0]);
        let beta = t(&[1], vec![0.0]);
        let rm = t(&[1], vec![0.0]);
        let rv = t(&[1], vec![1.0]);
        let y = norm2d(&x, &gamma, &beta, &rm, &rv, true, true, 1e-5, 0.1).unwrap();
        let d = y.data();
        assert!(close(d[0], -0.999995, 1e-6));
        assert!(close(d[1], 0.999995, 1e-6));
        // running stats folded with momentum 0.1
        assert!(close(rm.data()[0], 0.2, 1e-12));
        assert!(close(rv.data()[0], 1.0, 1e-12));
    }

    #[test]
    fn norm2d_eval_uses_running_stats() {
        let x = t(&[1, 1, 1, 2], vec![1.0, 3.0]);
        let gamma = t(&[1], vec![2.0]);
        let beta = t(&[1], vec![1.0]);
        let rm = t(&[1], vec![1.0]);
        let rv = t(&[1], vec![4.0]);
        let y = norm2d(&x, &gamma, &beta, &rm, &rv, false, false, 0.0, 0.1).unwrap();
        let d = y.data();
        // xhat = (x - 1) / 2 -> {0, 1}; y = 2*xhat + 1
        assert!(close(d[0], 1.0, 1e-12));
        assert!(close(d[1], 3.0, 1e-12));
    }

    #[test]
    fn norm2d_rejects_single_value_in_training() {
        let x = t(&[1, 1, 1, 1], vec![1.0]);
        let one = t(&[1], vec![1.0]);
        let zero = t(&[1], vec![0.0]);
        assert!(matches!(
            norm2d(&x, &one, &zero, &zero, &one, true, true, 1e-5, 0.1),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn norm2d_no_update_mode_keeps_buffers() {
        let x = t(&[1, 1, 1, 2], vec![1.0, 3.0]);
        let one = t(&[1], vec![1.0]);
        let zero = t(&[1], vec![0.0]);
        let rm = t(&[1], vec![0.5]);
        let rv = t(&[1], vec![2.0]);
        let y = norm2d(&x, &one, &zero, &rm, &rv, true, false, 1e-5, 0.1).unwrap();
        // batch statistics are used...
        assert!(close(y.data()[1], 0.999995, 1e-6));
        // ...but the buffers stay put
        assert_eq!(rm.data()[0], 0.5);
        assert_eq!(rv.data()[0], 2.0);
    }

    #[test]
    fn bilinear_upsample_2x2_to_4x4() {
        let x = t(&[1, 1, 2, 2], vec![0.0, 1.0, 2.0, 3.0]);
        let y = bilinear_upsample(&x, 4, 4).unwrap();
        let d = y.data();
        // corners clamp to the nearest source pixel
        assert!(close(d[0], 0.0, 1e-12));
        assert!(close(d[15], 3.0, 1e-12));
        // interior blends with quarter/three-quarter weights
        assert!(close(d[4 + 1], 0.75, 1e-12));
    }

    #[test]
    fn bilinear_upsample_preserves_constant() {
        let x = t(&[1, 2, 3, 3], vec![7.0; 18]);
        let y = bilinear_upsample(&x, 12, 12).unwrap();
        assert!(y.data().iter().all(|&v| close(v, 7.0, 1e-12)));
    }
}

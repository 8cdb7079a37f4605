//! Gradient clipping and the Nesterov-momentum SGD update.

use super::ParamSet;
use crate::scalar::Scalar;

/// Scales all parameter gradients so their joint Euclidean norm does not
/// exceed `max_norm`. Buffers and parameters without gradients are left
/// alone. Returns the norm measured before clipping.
pub fn clip_grad_total_norm<S: Scalar>(params: &ParamSet<S>, max_norm: f64) -> f64 {
    let mut sq = 0.0f64;
    for (_, t) in params.iter_params() {
        if let Some(g) = t.grad() {
            for v in g {
                let v = v.to_f64_lossy();
                sq += v * v;
            }
        }
    }
    let total = sq.sqrt();
    if total > max_norm && total > 0.0 {
        let k = S::cast(max_norm / total);
        for (_, t) in params.iter_params() {
            if let Some(mut g) = t.grad() {
                for v in g.iter_mut() {
                    *v = *v * k;
                }
                t.set_grad(g);
            }
        }
    }
    total
}

/// One SGD step with Nesterov momentum and classic coupled weight decay
/// (decay is added to the gradient before the momentum update):
///
/// ```text
/// g <- grad + wd * p
/// v <- m * v + g
/// p <- p - lr * (g + m * v)
/// ```
///
/// Parameters without a gradient are skipped and keep their momentum.
/// Increments the step counter.
pub fn sgd_nesterov_step<S: Scalar>(
    params: &mut ParamSet<S>,
    lr: f64,
    momentum: f64,
    weight_decay: f64,
) {
    let lr = S::cast(lr);
    let m = S::cast(momentum);
    let wd = S::cast(weight_decay);
    let names: Vec<String> = params.iter_params().map(|(n, _)| n.to_string()).collect();
    for name in &names {
        let t = params.get(name).clone();
        let Some(grad) = t.grad() else { continue };
        let mut p = t.data_vec();
        params.with_momentum(name, |vel| {
            for i in 0..p.len() {
                let g = grad[i] + wd * p[i];
                vel[i] = m * vel[i] + g;
                p[i] = p[i] - lr * (g + m * vel[i]);
            }
        });
        t.set_data(p);
    }
    params.bump_step();
}

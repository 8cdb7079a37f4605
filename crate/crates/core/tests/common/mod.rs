//! Shared helpers for the integration tests: deterministic input generation
//! and a central-difference gradient checker.

#![allow(dead_code)]

use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use ssda_core::tensor::Tensor;

pub const FD_STEP: f64 = 1e-4;
pub const FD_TOL: f64 = 1e-4;

/// Uniform values in [-2, 2], reproducible per seed.
pub fn random_values(seed: u64, n: usize) -> Vec<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n).map(|_| rng.gen::<f64>() * 4.0 - 2.0).collect()
}

/// Strictly positive values in [lo, hi] (for variances and probabilities).
pub fn random_values_in(seed: u64, n: usize, lo: f64, hi: f64) -> Vec<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n).map(|_| rng.gen::<f64>() * (hi - lo) + lo).collect()
}

/// Maximum relative disagreement between the analytic gradient of
/// `f(inputs)` (a scalar-valued graph over 64-bit tensors) and central finite
/// differences, over every element of every input.
///
/// Relative error is |g_a - g_fd| / max(1, |g_fd|).
pub fn fd_max_rel_error<F>(inputs: &[(Vec<usize>, Vec<f64>)], f: F) -> f64
where
    F: Fn(&[Tensor<f64>]) -> Tensor<f64>,
{
    let params: Vec<Tensor<f64>> = inputs
        .iter()
        .map(|(s, d)| Tensor::param(s, d.clone()))
        .collect();
    let loss = f(&params);
    assert_eq!(loss.numel(), 1, "fd check needs a scalar loss");
    loss.backward().expect("backward");
    let grads: Vec<Vec<f64>> = params
        .iter()
        .map(|p| p.grad().unwrap_or_else(|| vec![0.0; p.numel()]))
        .collect();

    let eval = |pi: usize, j: usize, delta: f64| -> f64 {
        let probes: Vec<Tensor<f64>> = inputs
            .iter()
            .enumerate()
            .map(|(k, (s, d))| {
                let mut dd = d.clone();
                if k == pi {
                    dd[j] += delta;
                }
                Tensor::leaf(s, dd)
            })
            .collect();
        f(&probes).item()
    };

    let mut max_rel = 0.0f64;
    for (pi, (_, d)) in inputs.iter().enumerate() {
        for j in 0..d.len() {
            let g_fd = (eval(pi, j, FD_STEP) - eval(pi, j, -FD_STEP)) / (2.0 * FD_STEP);
            let g_an = grads[pi][j];
            let rel = (g_an - g_fd).abs() / g_fd.abs().max(1.0);
            if rel > max_rel {
                max_rel = rel;
            }
        }
    }
    max_rel
}

/// Asserts the finite-difference agreement required of every differentiable
/// operation and loss.
pub fn assert_grads_match<F>(name: &str, inputs: &[(Vec<usize>, Vec<f64>)], f: F)
where
    F: Fn(&[Tensor<f64>]) -> Tensor<f64>,
{
    let rel = fd_max_rel_error(inputs, f);
    assert!(
        rel < FD_TOL,
        "{name}: max relative gradient error {rel:.3e} exceeds {FD_TOL:.0e}"
    );
}

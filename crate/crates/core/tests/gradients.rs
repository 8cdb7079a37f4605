//! Finite-difference verification of every differentiable operation, run in
//! 64-bit mode. Non-scalar outputs are reduced through a fixed random linear
//! functional so the checker sees the full Jacobian.

mod common;

use common::{assert_grads_match, random_values, random_values_in};
use ssda_core::losses;
use ssda_core::tensor::{self, Tensor};

/// Reduces `y` to a scalar via a fixed random projection.
fn project(y: &Tensor<f64>, seed: u64) -> Tensor<f64> {
    let r = Tensor::leaf(y.shape(), random_values(seed, y.numel()));
    tensor::sum(&tensor::mul(y, &r).unwrap())
}

#[test]
fn grad_add() {
    let shape = vec![2, 3, 5];
    let n = 30;
    assert_grads_match(
        "add",
        &[
            (shape.clone(), random_values(1, n)),
            (shape.clone(), random_values(2, n)),
        ],
        |p| project(&tensor::add(&p[0], &p[1]).unwrap(), 100),
    );
}

#[test]
fn grad_mul() {
    let shape = vec![2, 3, 5];
    let n = 30;
    assert_grads_match(
        "mul",
        &[
            (shape.clone(), random_values(3, n)),
            (shape.clone(), random_values(4, n)),
        ],
        |p| project(&tensor::mul(&p[0], &p[1]).unwrap(), 101),
    );
}

#[test]
fn grad_scale() {
    assert_grads_match("scale", &[(vec![3, 4], random_values(5, 12))], |p| {
        project(&tensor::scale(&p[0], -1.7), 102)
    });
}

#[test]
fn grad_sum_and_mean() {
    assert_grads_match("sum", &[(vec![2, 3, 5], random_values(6, 30))], |p| {
        tensor::sum(&p[0])
    });
    assert_grads_match("mean", &[(vec![2, 3, 5], random_values(7, 30))], |p| {
        tensor::mean(&p[0])
    });
}

#[test]
fn grad_relu() {
    assert_grads_match("relu", &[(vec![2, 3, 5], random_values(8, 30))], |p| {
        project(&tensor::relu(&p[0]), 103)
    });
}

#[test]
fn grad_softmax_all_axes() {
    let shape = vec![2, 3, 5];
    for axis in 0..3 {
        assert_grads_match(
            &format!("softmax axis {axis}"),
            &[(shape.clone(), random_values(9 + axis as u64, 30))],
            |p| project(&tensor::softmax(&p[0], axis).unwrap(), 104),
        );
    }
}

#[test]
fn grad_l2_normalize() {
    assert_grads_match(
        "l2_normalize",
        &[(vec![2, 4, 3], random_values(12, 24))],
        |p| project(&tensor::l2_normalize(&p[0], 1, 1e-12).unwrap(), 105),
    );
}

#[test]
fn grad_bilinear_upsample() {
    assert_grads_match(
        "bilinear_upsample x4",
        &[(vec![1, 2, 3, 3], random_values(13, 18))],
        |p| project(&tensor::bilinear_upsample(&p[0], 12, 12).unwrap(), 106),
    );
    assert_grads_match(
        "bilinear_upsample x2 rect",
        &[(vec![2, 1, 2, 4], random_values(14, 16))],
        |p| project(&tensor::bilinear_upsample(&p[0], 4, 8).unwrap(), 107),
    );
}

#[test]
fn grad_conv2d_stride1_padded() {
    // input [2,3,5,5], kernel 3x3, stride 1, padding 1, with bias
    assert_grads_match(
        "conv2d 3x3 s1 p1",
        &[
            (vec![2, 3, 5, 5], random_values(15, 150)),
            (vec![2, 3, 3, 3], random_values(16, 54)),
            (vec![2], random_values(17, 2)),
        ],
        |p| {
            project(
                &tensor::conv2d(&p[0], &p[1], Some(&p[2]), 1, 1, 1).unwrap(),
                108,
            )
        },
    );
}

#[test]
fn grad_conv2d_strided() {
    // 4x4 kernel, stride 4, no padding: the patchify projection
    assert_grads_match(
        "conv2d 4x4 s4",
        &[
            (vec![1, 2, 4, 4], random_values(18, 32)),
            (vec![3, 2, 4, 4], random_values(19, 96)),
            (vec![3], random_values(20, 3)),
        ],
        |p| {
            project(
                &tensor::conv2d(&p[0], &p[1], Some(&p[2]), 4, 0, 1).unwrap(),
                109,
            )
        },
    );
}

#[test]
fn grad_conv2d_dilated() {
    // dilation 2 as used by the context branches
    assert_grads_match(
        "conv2d 3x3 d2",
        &[
            (vec![1, 2, 5, 5], random_values(21, 50)),
            (vec![2, 2, 3, 3], random_values(22, 36)),
        ],
        |p| project(&tensor::conv2d(&p[0], &p[1], None, 1, 2, 2).unwrap(), 110),
    );
}

#[test]
fn grad_conv2d_stride2_asymmetric() {
    assert_grads_match(
        "conv2d 3x3 s2 p1",
        &[
            (vec![2, 1, 5, 4], random_values(23, 40)),
            (vec![2, 1, 3, 3], random_values(24, 18)),
        ],
        |p| project(&tensor::conv2d(&p[0], &p[1], None, 2, 1, 1).unwrap(), 111),
    );
}

#[test]
fn grad_norm2d_training_stats() {
    // gradients couple through the batch statistics in training mode
    let rm = random_values(27, 3);
    let rv = random_values_in(28, 3, 0.5, 2.0);
    assert_grads_match(
        "norm2d train",
        &[
            (vec![2, 3, 4, 4], random_values(25, 96)),
            (vec![3], random_values_in(26, 3, 0.5, 1.5)),
            (vec![3], random_values(29, 3)),
        ],
        move |p| {
            let rm = Tensor::leaf(&[3], rm.clone());
            let rv = Tensor::leaf(&[3], rv.clone());
            let y = tensor::norm2d(&p[0], &p[1], &p[2], &rm, &rv, true, false, 1e-5, 0.1).unwrap();
            project(&y, 112)
        },
    );
}

#[test]
fn grad_norm2d_eval_running_stats() {
    let rm = random_values(32, 3);
    let rv = random_values_in(33, 3, 0.5, 2.0);
    assert_grads_match(
        "norm2d eval",
        &[
            (vec![2, 3, 4, 4], random_values(30, 96)),
            (vec![3], random_values_in(31, 3, 0.5, 1.5)),
            (vec![3], random_values(34, 3)),
        ],
        move |p| {
            let rm = Tensor::leaf(&[3], rm.clone());
            let rv = Tensor::leaf(&[3], rv.clone());
            let y = tensor::norm2d(&p[0], &p[1], &p[2], &rm, &rv, false, false, 1e-5, 0.1).unwrap();
            project(&y, 113)
        },
    );
}

#[test]
fn grad_composite_chain() {
    // a miniature forward pass: conv -> norm -> relu -> upsample -> softmax
    let rm = vec![0.0; 2];
    let rv = vec![1.0; 2];
    assert_grads_match(
        "composite chain",
        &[
            (vec![1, 2, 4, 4], random_values(35, 32)),
            (vec![2, 2, 3, 3], random_values(36, 36)),
            (vec![2], random_values(37, 2)),
            (vec![2], random_values_in(38, 2, 0.5, 1.5)),
            (vec![2], random_values(39, 2)),
        ],
        move |p| {
            let rm = Tensor::leaf(&[2], rm.clone());
            let rv = Tensor::leaf(&[2], rv.clone());
            let c = tensor::conv2d(&p[0], &p[1], Some(&p[2]), 1, 1, 1).unwrap();
            let n = tensor::norm2d(&c, &p[3], &p[4], &rm, &rv, true, false, 1e-5, 0.1).unwrap();
            let r = tensor::relu(&n);
            let u = tensor::bilinear_upsample(&r, 8, 8).unwrap();
            let s = tensor::softmax(&u, 1).unwrap();
            project(&s, 114)
        },
    );
}

#[test]
fn grad_weighted_ce() {
    // labels with an ignored pixel and non-uniform class weights
    let labels: Vec<u8> = vec![0, 2, 1, 255, 1, 0, 2, 2, 255, 1, 0, 1, 2, 0, 1, 2];
    let alpha = vec![1.3, 0.7, 1.0];
    assert_grads_match(
        "weighted cross-entropy",
        &[(vec![2, 3, 2, 4], random_values(40, 48))],
        move |p| losses::weighted_ce(&p[0], &labels, &alpha, 255).unwrap(),
    );
}

#[test]
fn grad_soft_ce() {
    // dense probability targets: softmax of a fixed random table
    let raw = random_values(41, 48);
    let (b, c, hw) = (2, 3, 8);
    let mut targets = vec![0.0; raw.len()];
    for bi in 0..b {
        for px in 0..hw {
            let base = bi * c * hw + px;
            let m = (0..c)
                .map(|ci| raw[base + ci * hw])
                .fold(f64::MIN, f64::max);
            let z: f64 = (0..c).map(|ci| (raw[base + ci * hw] - m).exp()).sum();
            for ci in 0..c {
                targets[base + ci * hw] = (raw[base + ci * hw] - m).exp() / z;
            }
        }
    }
    assert_grads_match(
        "soft-target cross-entropy",
        &[(vec![2, 3, 2, 4], random_values(42, 48))],
        move |p| losses::soft_ce(&p[0], &targets).unwrap(),
    );
}

#[test]
fn grad_pixel_contrast() {
    // contrast over normalized embeddings so the fused node backpropagates
    // through an upstream op as in training
    let sample = losses::ContrastSample {
        pixels: vec![(0, 0), (1, 0), (2, 1), (3, 1), (4, 0), (5, 2)],
    };
    assert_grads_match(
        "pixel contrastive loss",
        &[(vec![1, 3, 2, 3], random_values(43, 18))],
        move |p| {
            let z = tensor::l2_normalize(&p[0], 1, 1e-12).unwrap();
            losses::pixel_contrast_loss(&z, &sample, 0.4).unwrap()
        },
    );
}

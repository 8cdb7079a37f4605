//! Core library for a small semi-supervised domain-adaptation training
//! stack for semantic segmentation: a reverse-mode tensor core, a compact
//! dilated-convolution segmentation network with a mean-teacher twin, a
//! procedural two-domain dataset, consistency and contrastive losses, and a
//! multi-round self-training driver.
//!
//! Everything is generic over the floating-point scalar through [`Scalar`];
//! training runs in `f32`, gradient verification in `f64`. The aliases below
//! fix the common concrete choices.

pub mod augment;
pub mod data;
pub mod error;
pub mod eval;
pub mod losses;
pub mod model;
pub mod rng;
pub mod scalar;
pub mod selftrain;
pub mod tensor;

pub use error::{Error, Result};
pub use scalar::Scalar;

pub type Tensor32 = tensor::Tensor<f32>;
pub type Tensor64 = tensor::Tensor<f64>;
pub type ParamSet32 = tensor::ParamSet<f32>;
pub type ParamSet64 = tensor::ParamSet<f64>;

//! Scalar abstraction: everything numeric is generic over `f32`/`f64`.

use num_traits::{Float, FromPrimitive, ToPrimitive};

/// Floating-point scalar for tensors, images and losses.
///
/// `f32` is the training precision, `f64` the verification precision used by
/// the finite-difference gradient checks.
pub trait Scalar:
    Float + FromPrimitive + ToPrimitive + std::fmt::Debug + std::fmt::Display + Default + 'static
{
    /// Conversion from `f64` literals and accumulators.
    fn cast(v: f64) -> Self {
        <Self as FromPrimitive>::from_f64(v).expect("f64 conversion")
    }

    /// Widening conversion for accumulation and reporting.
    fn to_f64_lossy(self) -> f64 {
        self.to_f64().expect("finite scalar")
    }
}

impl Scalar for f32 {}
impl Scalar for f64 {}

//! Scalar abstraction shared by every numerical routine in the crate.

use nalgebra::RealField;
use num_traits::{FromPrimitive, ToPrimitive};

/// Real floating-point scalar: `f32` or `f64`.
///
/// Math comes from [`RealField`]; conversions go through `num-traits`.
pub trait Scalar: RealField + Copy + FromPrimitive + ToPrimitive {
    /// Converts an `f64` literal or parameter into this scalar type.
    fn of(v: f64) -> Self;

    fn to_f64_lossy(self) -> f64;
}

impl Scalar for f64 {
    #[inline]
    fn of(v: f64) -> Self {
        v
    }

    #[inline]
    fn to_f64_lossy(self) -> f64 {
        self
    }
}

impl Scalar for f32 {
    #[inline]
    fn of(v: f64) -> Self {
        v as f32
    }

    #[inline]
    fn to_f64_lossy(self) -> f64 {
        self as f64
    }
}

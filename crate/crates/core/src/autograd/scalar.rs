use std::ops::{AddAssign, MulAssign, SubAssign};
use std::fmt::{Debug, Display};
use std::iter::Sum;

use ndarray::{LinalgScalar, ScalarOperand};
use num_traits::Float;

/// Floating point element type usable on the tape.
///
/// Training runs in `f32`; gradient checks run the same graphs in `f64`.
pub trait Scalar:
    LinalgScalar + Float + ScalarOperand + AddAssign + SubAssign + MulAssign + Debug + Display + Default + Sum + Send + Sync + 'static
{
    fn from_f64(v: f64) -> Self;
    fn to_f64(self) -> f64;
}

impl Scalar for f32 {
    #[inline]
    fn from_f64(v: f64) -> Self {
        v as f32
    }
    #[inline]
    fn to_f64(self) -> f64 {
        self as f64
    }
}

impl Scalar for f64 {
    #[inline]
    fn from_f64(v: f64) -> Self {
        v
    }
    #[inline]
    fn to_f64(self) -> f64 {
        self
    }
}

/// Shorthand for converting an `f64` literal into the tape scalar.
#[inline]
pub fn sc<T: Scalar>(v: f64) -> T {
    T::from_f64(v)
}

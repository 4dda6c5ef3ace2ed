use std::fmt::{Debug, Display};
use std::iter::Sum;

/// Floating-point element type for tensors.
///
/// Training runs in `f32`; gradient checking and the metric code use `f64`.
/// All algorithms are written against this trait so the two precisions share
/// one implementation.
pub trait Scalar:
    num_traits::Float + Debug + Display + Send + Sync + Sum + 'static
{
    fn from_f64(v: f64) -> Self;
    fn to_f64(self) -> f64;
}

impl Scalar for f32 {
    fn from_f64(v: f64) -> Self {
        v as f32
    }
    fn to_f64(self) -> f64 {
        self as f64
    }
}

impl Scalar for f64 {
    fn from_f64(v: f64) -> Self {
        v
    }
    fn to_f64(self) -> f64 {
        self
    }
}

/// Shorthand for converting literals inside generic numeric code.
pub fn c<S: Scalar>(v: f64) -> S {
    S::from_f64(v)
}

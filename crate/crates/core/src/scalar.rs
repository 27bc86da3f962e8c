//! Floating-point element types the numerics run on.
//!
//! Training runs in `f32` (checkpoints store 32-bit values); verification
//! against finite differences runs in `f64`.

use std::fmt::{Debug, Display};

use ndarray::LinalgScalar;
use num_traits::Float;

pub trait Scalar:
    LinalgScalar + Float + Debug + Display + Send + Sync + 'static + PartialOrd
{
    fn from_f64(v: f64) -> Self;
    fn as_f64(self) -> f64;
    /// Conversions for the 32-bit checkpoint representation.
    fn from_f32(v: f32) -> Self;
    fn as_f32(self) -> f32;
}

impl Scalar for f32 {
    #[inline]
    fn from_f64(v: f64) -> Self {
        v as f32
    }
    #[inline]
    fn as_f64(self) -> f64 {
        self as f64
    }
    #[inline]
    fn from_f32(v: f32) -> Self {
        v
    }
    #[inline]
    fn as_f32(self) -> f32 {
        self
    }
}

impl Scalar for f64 {
    #[inline]
    fn from_f64(v: f64) -> Self {
        v
    }
    #[inline]
    fn as_f64(self) -> f64 {
        self
    }
    #[inline]
    fn from_f32(v: f32) -> Self {
        v as f64
    }
    #[inline]
    fn as_f32(self) -> f32 {
        self as f32
    }
}

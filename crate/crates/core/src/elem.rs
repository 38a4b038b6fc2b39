//! Scalar element abstraction so the whole network stack can run in either
//! f32 (memory-friendly, default for training and inference) or f64
//! (gradient checks and tolerance-sensitive tests).

use ndarray::{LinalgScalar, ScalarOperand};
use std::fmt::{Debug, Display};
use std::iter::Sum;

pub trait Elem:
    LinalgScalar
    + num_traits::Float
    + ScalarOperand
    + Debug
    + Display
    + Send
    + Sync
    + Sum
    + 'static
{
    fn from_f64(x: f64) -> Self;
    fn to_f64(self) -> f64;
}

impl Elem for f32 {
    #[inline]
    fn from_f64(x: f64) -> Self {
        x as f32
    }
    #[inline]
    fn to_f64(self) -> f64 {
        self as f64
    }
}

impl Elem for f64 {
    #[inline]
    fn from_f64(x: f64) -> Self {
        x
    }
    #[inline]
    fn to_f64(self) -> f64 {
        self
    }
}

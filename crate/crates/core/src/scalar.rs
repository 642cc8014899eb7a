//! Scalar abstraction for the numeric core.
//!
//! Everything numeric in this crate is written against [`Scalar`] so the same
//! code instantiates at `f32` and `f64`. Randomness and configuration stay in
//! `f64` and are converted at the boundary, which keeps seeded runs comparable
//! across precisions.

use std::fmt::{Debug, Display};
use std::iter::Sum;
use std::ops::{AddAssign, DivAssign, MulAssign, SubAssign};

use num_traits::Float;
use serde::de::DeserializeOwned;
use serde::Serialize;

pub trait Scalar:
    Float
    + AddAssign
    + SubAssign
    + MulAssign
    + DivAssign
    + Sum
    + Debug
    + Display
    + Serialize
    + DeserializeOwned
    + Send
    + Sync
    + 'static
{
    fn from_f64(v: f64) -> Self;
    fn to_f64(self) -> f64;

    fn from_usize(v: usize) -> Self {
        Self::from_f64(v as f64)
    }

    /// Logistic function 1 / (1 + e^{-x}).
    fn sigmoid(self) -> Self {
        let one = Self::one();
        if self >= Self::zero() {
            one / (one + (-self).exp())
        } else {
            let e = self.exp();
            e / (one + e)
        }
    }

    /// ln(1 + e^x) computed without overflow for large |x|.
    fn softplus(self) -> Self {
        let zero = Self::zero();
        self.max(zero) + (-self.abs()).exp().ln_1p()
    }
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

/// Squared Euclidean distance between equal-length slices.
pub fn squared_distance<S: Scalar>(a: &[S], b: &[S]) -> S {
    debug_assert_eq!(a.len(), b.len());
    a.iter()
        .zip(b)
        .map(|(&x, &y)| {
            let d = x - y;
            d * d
        })
        .sum()
}

/// Dot product of equal-length slices.
pub fn dot<S: Scalar>(a: &[S], b: &[S]) -> S {
    debug_assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(&x, &y)| x * y).sum()
}

/// Softmax with max-subtraction. Returns a vector of the same length that
/// sums to one; a single entry yields exactly `[1.0]`.
pub fn softmax<S: Scalar>(logits: &[S]) -> Vec<S> {
    let max = logits
        .iter()
        .copied()
        .fold(S::neg_infinity(), |acc, v| acc.max(v));
    let exps: Vec<S> = logits.iter().map(|&v| (v - max).exp()).collect();
    let total: S = exps.iter().copied().sum();
    exps.into_iter().map(|e| e / total).collect()
}

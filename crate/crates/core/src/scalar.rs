//! Scalar abstraction shared by ratios, heatmaps and metrics.
//!
//! Everything that is a ratio of pixel counts (IoU, IoGT, precision, recall,
//! the bandwidth portion) is computed as an exact quotient of integers and
//! only then converted into the scalar type. With `f64` that conversion is a
//! single correctly rounded division; with [`Rational64`] it is exact, which
//! is what the oracle tests use.

use num_rational::Rational64;
use num_traits::{Num, ToPrimitive};
use std::fmt::Debug;

/// A numeric type that ratios of pixel counts can be expressed in.
pub trait Scalar: Num + Copy + PartialOrd + Debug + Send + Sync + 'static {
    /// `num / den`. `den` must be nonzero.
    fn from_counts(num: u64, den: u64) -> Self;

    /// Lossy conversion from `f64`. Returns `None` for non-finite input or
    /// values the type cannot represent.
    fn from_f64(value: f64) -> Option<Self>;

    fn to_f64(self) -> f64;

    /// `floor(self * n)` for non-negative `self`, saturating at `u64::MAX`.
    fn floor_mul(self, n: u64) -> u64;
}

impl Scalar for f64 {
    fn from_counts(num: u64, den: u64) -> Self {
        num as f64 / den as f64
    }

    fn from_f64(value: f64) -> Option<Self> {
        value.is_finite().then_some(value)
    }

    fn to_f64(self) -> f64 {
        self
    }

    fn floor_mul(self, n: u64) -> u64 {
        floor_mul_float(self, n)
    }
}

impl Scalar for f32 {
    fn from_counts(num: u64, den: u64) -> Self {
        (num as f64 / den as f64) as f32
    }

    fn from_f64(value: f64) -> Option<Self> {
        let v = value as f32;
        v.is_finite().then_some(v)
    }

    fn to_f64(self) -> f64 {
        self as f64
    }

    fn floor_mul(self, n: u64) -> u64 {
        floor_mul_float(self as f64, n)
    }
}

impl Scalar for Rational64 {
    fn from_counts(num: u64, den: u64) -> Self {
        Rational64::new(num as i64, den as i64)
    }

    fn from_f64(value: f64) -> Option<Self> {
        Rational64::approximate_float(value)
    }

    fn to_f64(self) -> f64 {
        ToPrimitive::to_f64(&self).unwrap_or(f64::NAN)
    }

    fn floor_mul(self, n: u64) -> u64 {
        let prod = num_rational::Ratio::new(*self.numer() as i128, *self.denom() as i128)
            * (n as i128);
        let floor = prod.floor().to_integer();
        floor.clamp(0, u64::MAX as i128) as u64
    }
}

// Decimal portions such as 0.29 are not representable, and 0.29 * 100
// evaluates to 28.999999999999996. Products within float noise of an integer
// snap to it.
fn floor_mul_float(value: f64, n: u64) -> u64 {
    let product = value * n as f64;
    let nearest = product.round();
    let snapped = if (product - nearest).abs() <= 1e-9 * (n as f64).max(1.0) {
        nearest
    } else {
        product.floor()
    };
    snapped.max(0.0) as u64
}

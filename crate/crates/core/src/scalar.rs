//! Scalar abstraction shared by every numeric routine in the crate.

use std::fmt::{Debug, Display};

use num_traits::{Float, FromPrimitive, NumAssign, ToPrimitive};

/// Floating point element type: `f32` or `f64`.
///
/// Storage may use either width; reductions (dot products, means, norms)
/// always accumulate in `f64` through [`Scalar::to_f64_lossless`].
pub trait Scalar:
    Float + FromPrimitive + ToPrimitive + NumAssign + Debug + Display + Default + Send + Sync + 'static
{
    /// Widening conversion used by every accumulator.
    fn to_f64_lossless(self) -> f64;
    /// Rounding conversion back to storage width.
    fn from_f64_rounded(v: f64) -> Self;
}

impl Scalar for f32 {
    #[inline]
    fn to_f64_lossless(self) -> f64 {
        self as f64
    }
    #[inline]
    fn from_f64_rounded(v: f64) -> Self {
        v as f32
    }
}

impl Scalar for f64 {
    #[inline]
    fn to_f64_lossless(self) -> f64 {
        self
    }
    #[inline]
    fn from_f64_rounded(v: f64) -> Self {
        v
    }
}

/// Dot product of two equal-length slices accumulated in `f64`.
#[inline]
pub fn dot_f64<A: Scalar, B: Scalar>(a: &[A], b: &[B]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    a.iter()
        .zip(b)
        .map(|(&x, &y)| x.to_f64_lossless() * y.to_f64_lossless())
        .sum()
}

/// Euclidean norm accumulated in `f64`.
#[inline]
pub fn norm_f64<T: Scalar>(v: &[T]) -> f64 {
    v.iter()
        .map(|&x| {
            let x = x.to_f64_lossless();
            x * x
        })
        .sum::<f64>()
        .sqrt()
}

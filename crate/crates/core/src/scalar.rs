use std::fmt::{Debug, Display};
use std::iter::Sum;

use num_traits::float::TotalOrder;
use num_traits::{Float, FromPrimitive, NumAssign, ToPrimitive};

/// Floating-point element type accepted by the kernels and the clustering code.
pub trait Scalar:
    Float
    + TotalOrder
    + NumAssign
    + FromPrimitive
    + ToPrimitive
    + Sum
    + Default
    + Debug
    + Display
    + Send
    + Sync
    + 'static
{
    /// Lossless widening used for exact reductions.
    fn to_f64_exact(self) -> f64;

    /// Nearest representable value; NaN stays NaN.
    fn from_f64_nearest(v: f64) -> Self;

    /// Smallest representable value that is `>= v`.
    fn from_f64_upward(v: f64) -> Self;
}

impl Scalar for f32 {
    #[inline]
    fn to_f64_exact(self) -> f64 {
        self as f64
    }

    #[inline]
    fn from_f64_nearest(v: f64) -> Self {
        v as f32
    }

    fn from_f64_upward(v: f64) -> Self {
        let r = v as f32;
        if (r as f64) < v {
            r.next_up()
        } else {
            r
        }
    }
}

impl Scalar for f64 {
    #[inline]
    fn to_f64_exact(self) -> f64 {
        self
    }

    #[inline]
    fn from_f64_nearest(v: f64) -> Self {
        v
    }

    #[inline]
    fn from_f64_upward(v: f64) -> Self {
        v
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn upward_rounding_never_undershoots() {
        for &v in &[0.1f64, 1.0 / 3.0, 0.016666666666666666, 1e-30, 2.5] {
            let r = f32::from_f64_upward(v);
            assert!(r as f64 >= v);
            assert!((r.next_down() as f64) < v);
        }
        assert_eq!(f32::from_f64_upward(0.5), 0.5);
    }
}

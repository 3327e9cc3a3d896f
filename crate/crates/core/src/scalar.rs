//! Scalar abstraction shared by every differentiable component.

use std::fmt::{Debug, Display};
use std::iter::Sum;
use std::ops::{AddAssign, DivAssign, MulAssign, SubAssign};

use num_traits::{Float, FloatConst, FromPrimitive, ToPrimitive};

/// Floating point scalar: `f32` or `f64`.
pub trait Real:
    Float
    + FloatConst
    + FromPrimitive
    + ToPrimitive
    + AddAssign
    + SubAssign
    + MulAssign
    + DivAssign
    + Sum
    + Default
    + Debug
    + Display
    + Send
    + Sync
    + 'static
{
    /// Lossy conversion from `f64`.
    #[inline]
    fn lit(x: f64) -> Self {
        Self::from_f64(x).expect("f64 is representable")
    }

    #[inline]
    fn as_f64(self) -> f64 {
        self.to_f64().expect("finite or infinite float converts")
    }

    /// Slack allowed when `n` probabilities in this precision must sum to 1.
    #[inline]
    fn sum_tolerance(n: usize) -> f64 {
        f64::max(1e-9, 4.0 * n as f64 * Self::epsilon().as_f64())
    }
}

impl Real for f32 {}
impl Real for f64 {}

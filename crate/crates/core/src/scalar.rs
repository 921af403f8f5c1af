//! Floating-point scalar abstraction shared by every numeric module.
//!
//! The engine runs in `f64` by default; `f32` exists to exercise
//! precision-sensitive paths. Everything that crosses a file or wire boundary
//! is widened to `f64`, which is lossless for both.

use std::fmt::{Debug, Display};
use std::iter::Sum;

use num_traits::{Float, FromPrimitive, NumAssign, ToPrimitive};

/// Floating point: f32 or f64.
pub trait Scalar:
    Float + FromPrimitive + ToPrimitive + NumAssign + Sum + Debug + Display + Default + Send + Sync + 'static
{
    /// Storage size in bytes, used by the memory ledger.
    const BYTES: usize;
    /// Name used in reports.
    const NAME: &'static str;

    /// Converts from `f64`, rounding to nearest for narrower types.
    fn of(v: f64) -> Self;

    /// Widens to `f64` (exact for f32 and f64).
    fn widen(self) -> f64;
}

impl Scalar for f64 {
    const BYTES: usize = 8;
    const NAME: &'static str = "f64";

    #[inline]
    fn of(v: f64) -> Self {
        v
    }

    #[inline]
    fn widen(self) -> f64 {
        self
    }
}

impl Scalar for f32 {
    const BYTES: usize = 4;
    const NAME: &'static str = "f32";

    #[inline]
    fn of(v: f64) -> Self {
        v as f32
    }

    #[inline]
    fn widen(self) -> f64 {
        self as f64
    }
}

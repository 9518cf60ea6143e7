//! Floating-point scalar abstraction shared by every numeric module.
//!
//! Every model runs in `f32` or `f64`; gradient checks use the identical code
//! paths in `f64`.

use std::fmt::{Debug, Display};
use std::iter::Sum;

use num_traits::{Float, FromPrimitive, ToPrimitive};

/// floating point: f32 or f64
pub trait Scalar:
    Float + FromPrimitive + ToPrimitive + Default + Debug + Display + Sum + Send + Sync + 'static
{
    /// Width in bytes of the on-disk representation of this scalar.
    const BYTES: usize;

    #[inline]
    fn of(v: f64) -> Self {
        // Both implementors accept any f64 (f32 rounds), so this never fails.
        Self::from_f64(v).unwrap_or_else(Self::nan)
    }

    #[inline]
    fn f64(self) -> f64 {
        self.to_f64().unwrap_or(f64::NAN)
    }

    #[inline]
    fn cast<U: Scalar>(self) -> U {
        U::of(self.f64())
    }
}

impl Scalar for f32 {
    const BYTES: usize = 4;
}

impl Scalar for f64 {
    const BYTES: usize = 8;
}

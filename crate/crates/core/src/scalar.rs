use std::fmt::{Debug, Display, LowerExp};

use num_traits::{Float, FromPrimitive, ToPrimitive};

/// Real floating-point scalar usable by every numerical routine in the crate.
///
/// Implemented for `f32` and `f64`.
pub trait Scalar:
    faer::traits::RealField
    + Float
    + FromPrimitive
    + ToPrimitive
    + Copy
    + Send
    + Sync
    + Debug
    + Display
    + LowerExp
    + Default
    + 'static
{
    /// Converts an `f64` constant, rounding to the target precision.
    #[inline]
    fn lit(x: f64) -> Self {
        <Self as FromPrimitive>::from_f64(x).expect("f64 literal is representable")
    }

    #[inline]
    fn to_f64_lossy(self) -> f64 {
        ToPrimitive::to_f64(&self).unwrap_or(f64::NAN)
    }

    /// Tolerance used to accept a basis as orthonormal.
    fn orthonormal_tol() -> Self {
        Float::max(Self::lit(1e-10), <Self as Float>::epsilon() * Self::lit(1e3))
    }
}

impl Scalar for f32 {}
impl Scalar for f64 {}

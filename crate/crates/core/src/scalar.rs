use std::fmt::{Debug, Display, LowerExp};
use std::iter::Sum;
use std::str::FromStr;

use num_traits::{Float, FromPrimitive, NumAssign, ToPrimitive};

/// Floating-point scalar the linear algebra and Gaussian metrics are generic over.
///
/// Tolerances are per-type: the `f64` values are the contract values, the `f32`
/// ones are loosened to what single precision can actually resolve.
pub trait Real:
    Float
    + FromPrimitive
    + ToPrimitive
    + NumAssign
    + Sum
    + Debug
    + Display
    + LowerExp
    + FromStr
    + Default
    + Send
    + Sync
    + 'static
{
    /// Relative off-diagonal threshold at which Jacobi sweeps stop.
    fn jacobi_tol() -> Self;
    /// Relative asymmetry accepted by [`crate::linalg::SpdMatrix`].
    fn symmetry_tol() -> Self;
    /// Significant digits needed for a lossless decimal round trip.
    fn round_trip_digits() -> usize;

    #[inline]
    fn lit(x: f64) -> Self {
        Self::from_f64(x).expect("literal representable in scalar type")
    }

    /// Lossless scientific-notation rendering.
    fn to_full_string(self) -> String {
        format!("{:.*e}", Self::round_trip_digits() - 1, self)
    }
}

impl Real for f64 {
    fn jacobi_tol() -> Self {
        1e-12
    }
    fn symmetry_tol() -> Self {
        1e-10
    }
    fn round_trip_digits() -> usize {
        17
    }
}

impl Real for f32 {
    fn jacobi_tol() -> Self {
        1e-6
    }
    fn symmetry_tol() -> Self {
        1e-5
    }
    fn round_trip_digits() -> usize {
        9
    }
}

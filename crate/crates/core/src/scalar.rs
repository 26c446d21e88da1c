//! Floating-point scalar abstraction shared by every numeric routine.

use std::fmt::{Debug, Display};
use std::iter::Sum;
use std::ops::{AddAssign, DivAssign, MulAssign, SubAssign};

use num_traits::{Float, FromPrimitive, ToPrimitive};

/// Scalar type the model, the autodiff tape and the optimizer are generic over.
///
/// Implemented for `f32` (training, checkpoints) and `f64` (gradient checking,
/// likelihood identities).
pub trait Scalar:
    Float
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
    /// Lossless-enough conversion from an `f64` literal.
    #[inline]
    fn lit(x: f64) -> Self {
        Self::from_f64(x).expect("f64 literal representable")
    }

    #[inline]
    fn as_f64(self) -> f64 {
        self.to_f64().expect("finite conversion to f64")
    }

    /// Little-endian `f32` encoding used by the checkpoint container.
    fn to_f32_bits(self) -> [u8; 4] {
        (self.as_f64() as f32).to_le_bytes()
    }

    fn from_f32_bits(bytes: [u8; 4]) -> Self {
        Self::lit(f32::from_le_bytes(bytes) as f64)
    }
}

impl Scalar for f32 {}
impl Scalar for f64 {}

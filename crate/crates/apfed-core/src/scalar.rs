//! Scalar abstraction for the numeric core.
//!
//! Everything numeric (tensors, the tape, losses, datasets) is generic over
//! [`Scalar`] so the same code paths run in f32 for training and in f64 for
//! high-precision oracles. Reductions accumulate in f64 regardless of the
//! element type.

use num_traits::{Float, FromPrimitive, ToPrimitive};

pub trait Scalar:
    Float
    + FromPrimitive
    + ToPrimitive
    + Default
    + std::fmt::Debug
    + std::fmt::Display
    + Send
    + Sync
    + 'static
{
    /// Guard added to denominators (cosine norms, relative-error checks).
    fn eps_denom() -> Self {
        cast(1e-8)
    }
}

impl Scalar for f32 {}
impl Scalar for f64 {}

/// Converts an f64 constant to the working scalar type.
///
/// Panics only if the target type cannot represent any f64, which neither
/// f32 nor f64 can trigger; f64 values outside f32 range saturate to
/// infinity per the standard conversion.
pub fn cast<T: Scalar>(x: f64) -> T {
    T::from_f64(x).expect("f64 constant must convert to scalar type")
}

pub fn to_f64<T: Scalar>(x: T) -> f64 {
    x.to_f64().expect("scalar must convert to f64")
}

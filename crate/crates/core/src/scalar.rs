//! Scalar abstraction shared by every numeric module.

use std::fmt::{Debug, Display};
use std::str::FromStr;

use nalgebra::RealField;
use num_traits::{FromPrimitive, ToPrimitive};

/// Real floating-point scalar usable throughout the crate (`f32` or `f64`).
pub trait Real:
    RealField
    + Copy
    + FromPrimitive
    + ToPrimitive
    + FromStr
    + Display
    + Debug
    + Default
    + Send
    + Sync
    + 'static
{
    /// Converts an `f64` literal into this scalar type.
    #[inline]
    fn lit(v: f64) -> Self {
        nalgebra::convert(v)
    }

    /// Lossy conversion to `f64` for reporting.
    #[inline]
    fn as_f64(self) -> f64 {
        self.to_f64().unwrap_or(f64::NAN)
    }

    /// Converts a count into this scalar type.
    #[inline]
    fn from_count(n: usize) -> Self {
        nalgebra::convert(n as f64)
    }

    /// Machine epsilon of the scalar type.
    fn machine_eps() -> Self;
}

impl Real for f64 {
    fn machine_eps() -> Self {
        f64::EPSILON
    }
}

impl Real for f32 {
    fn machine_eps() -> Self {
        f32::EPSILON
    }
}

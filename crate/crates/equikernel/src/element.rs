//! Scalar element abstraction: the crate computes in `f32` by default and
//! in `f64` for finite-difference gradient verification.

use num_traits::Float;

/// Floating-point element type for tensors.
///
/// Implemented for `f32` (default compute precision) and `f64` (gradient
/// checking). The two conversion methods are total: every `f32` is exactly
/// representable in `f64`, and the `f64 → f32` direction rounds.
pub trait Element:
    Float
    + num_traits::NumAssign
    + std::iter::Sum
    + std::fmt::Debug
    + std::fmt::Display
    + Default
    + Send
    + Sync
    + 'static
{
    /// Exact or rounded conversion from `f64`.
    fn from_f64(x: f64) -> Self;
    /// Widening (or identity) conversion to `f64`.
    fn to_f64(self) -> f64;
}

impl Element for f32 {
    #[inline(always)]
    fn from_f64(x: f64) -> Self {
        x as f32
    }
    #[inline(always)]
    fn to_f64(self) -> f64 {
        f64::from(self)
    }
}

impl Element for f64 {
    #[inline(always)]
    fn from_f64(x: f64) -> Self {
        x
    }
    #[inline(always)]
    fn to_f64(self) -> f64 {
        self
    }
}

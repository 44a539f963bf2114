//! Floating-point scalar abstraction: the numeric core works for `f32` and
//! `f64`; concrete aliases live at the crate root.

use num_traits::{Float, FromPrimitive, NumAssignOps, ToPrimitive};

pub trait Scalar:
    Float
    + FromPrimitive
    + ToPrimitive
    + NumAssignOps
    + std::iter::Sum
    + std::fmt::Debug
    + std::fmt::Display
    + Default
    + Send
    + Sync
    + 'static
{
}

impl<T> Scalar for T where
    T: Float
        + FromPrimitive
        + ToPrimitive
        + NumAssignOps
        + std::iter::Sum
        + std::fmt::Debug
        + std::fmt::Display
        + Default
        + Send
        + Sync
        + 'static
{
}

/// Shorthand for lifting an `f64` literal into the generic scalar.
#[inline]
pub fn fl<F: Scalar>(x: f64) -> F {
    F::from_f64(x).expect("f64 convertible to scalar")
}

/// Lifts a `usize` (lengths, counts) into the generic scalar.
#[inline]
pub fn fu<F: Scalar>(x: usize) -> F {
    F::from_usize(x).expect("usize convertible to scalar")
}

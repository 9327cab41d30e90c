//! Floating-point abstraction for the numeric kernels.

use ndarray::ScalarOperand;
use num_traits::{Float, FromPrimitive};
use std::fmt::{Debug, Display};
use std::iter::Sum;
use std::ops::{AddAssign, DivAssign, MulAssign, SubAssign};

/// Scalar type the math kernels are generic over: `f32` or `f64`.
///
/// The concrete pipeline uses [`crate::Real`]; the generic form exists so
/// the kernels can be exercised at both precisions.
pub trait Scalar:
    Float
    + FromPrimitive
    + ScalarOperand
    + Sum<Self>
    + AddAssign
    + SubAssign
    + MulAssign
    + DivAssign
    + Send
    + Sync
    + Debug
    + Display
    + 'static
{
}

impl Scalar for f32 {}
impl Scalar for f64 {}

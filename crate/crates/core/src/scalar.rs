//! Floating-point scalar abstraction shared by every numeric routine in the crate.

use std::fmt::{Debug, Display, LowerExp};
use std::iter::Sum;
use std::ops::{AddAssign, DivAssign, MulAssign, SubAssign};

use ndarray::{LinalgScalar, ScalarOperand};
use num_traits::{Float, FloatConst, FromPrimitive, ToPrimitive};

/// Real scalar type the kernels, solvers and networks are generic over.
///
/// Implemented for `f32` and `f64`. Tolerances quoted throughout the crate
/// (1e-8 reconstruction, 1e-10 time limits, ...) assume `f64`.
pub trait Scalar:
    Float
    + FloatConst
    + FromPrimitive
    + ToPrimitive
    + LinalgScalar
    + ScalarOperand
    + Sum
    + AddAssign
    + SubAssign
    + MulAssign
    + DivAssign
    + Default
    + Debug
    + Display
    + LowerExp
    + Send
    + Sync
    + 'static
{
    /// Converts an `f64` literal. Never fails for the finite constants used here.
    #[inline]
    fn lit(v: f64) -> Self {
        Self::from_f64(v).expect("finite literal")
    }

    #[inline]
    fn as_f64(self) -> f64 {
        self.to_f64().unwrap_or(f64::NAN)
    }

    /// `sign` with `sign(0) = 0` (NaN maps to 0 as well).
    #[inline]
    fn sign0(self) -> Self {
        if self > Self::zero() {
            Self::one()
        } else if self < Self::zero() {
            -Self::one()
        } else {
            Self::zero()
        }
    }
}

impl Scalar for f32 {}
impl Scalar for f64 {}

/// Logistic sigmoid, evaluated without overflow for large |u|.
pub fn sigmoid<T: Scalar>(u: T) -> T {
    if u >= T::zero() {
        T::one() / (T::one() + (-u).exp())
    } else {
        let e = u.exp();
        e / (T::one() + e)
    }
}

/// `log(1 + e^u)`, stable for both signs.
pub fn softplus<T: Scalar>(u: T) -> T {
    if u > T::zero() {
        u + (-u).exp().ln_1p()
    } else {
        u.exp().ln_1p()
    }
}

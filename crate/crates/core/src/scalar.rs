//! Scalar abstractions.
//!
//! [`Real`] is the floating-point element type every numerical routine is
//! generic over (`f32` or `f64`). [`Scalar`] is the wider family of values a
//! network can be evaluated on: plain reals and forward-mode [`Dual`]s.
//!
//! [`Dual`]: crate::autodiff::Dual

use std::fmt::{Debug, Display};
use std::iter::Sum;
use std::ops::{Add, AddAssign, Mul, MulAssign, Neg, Sub, SubAssign};

use num_traits::{Float, FloatConst, FromPrimitive, ToPrimitive};

use crate::nn::Activation;

/// floating point: f32 or f64
pub trait Real:
    Float
    + FloatConst
    + FromPrimitive
    + ToPrimitive
    + AddAssign
    + SubAssign
    + MulAssign
    + Sum
    + Default
    + Debug
    + Display
    + Send
    + Sync
    + 'static
    + Scalar<Self>
{
    /// Lossless-enough conversion from an `f64` literal.
    #[inline]
    fn of(v: f64) -> Self {
        Self::from_f64(v).expect("f64 literal representable")
    }

    #[inline]
    fn of_usize(v: usize) -> Self {
        Self::from_usize(v).expect("usize representable")
    }

    #[inline]
    fn as_f64(self) -> f64 {
        self.to_f64().expect("finite conversion to f64")
    }
}

impl Real for f32 {}
impl Real for f64 {}

/// A value the network primitives can be evaluated on.
///
/// Parameters are always plain `T`; only activations flow as `Self`.
pub trait Scalar<T>:
    Copy
    + Debug
    + Send
    + Sync
    + Add<Output = Self>
    + Sub<Output = Self>
    + Mul<Output = Self>
    + Neg<Output = Self>
{
    fn lift(v: T) -> Self;
    fn primal(&self) -> T;
    /// `self * k` for a constant `k`.
    fn scale(self, k: T) -> Self;
    /// `self + k * z` for a constant `k`.
    fn mul_add_const(self, k: T, z: Self) -> Self;
    fn sine(self) -> Self;
    fn cosine(self) -> Self;
    fn square(self) -> Self;
    fn activate(self, kind: Activation) -> Self;

    fn finite(&self) -> bool;
}

macro_rules! impl_scalar_for_real {
    ($t:ty) => {
        impl Scalar<$t> for $t {
            #[inline]
            fn lift(v: $t) -> Self {
                v
            }
            #[inline]
            fn primal(&self) -> $t {
                *self
            }
            #[inline]
            fn scale(self, k: $t) -> Self {
                self * k
            }
            #[inline]
            fn mul_add_const(self, k: $t, z: Self) -> Self {
                self + k * z
            }
            #[inline]
            fn sine(self) -> Self {
                Float::sin(self)
            }
            #[inline]
            fn cosine(self) -> Self {
                Float::cos(self)
            }
            #[inline]
            fn square(self) -> Self {
                self * self
            }
            #[inline]
            fn activate(self, kind: Activation) -> Self {
                kind.eval(self)
            }
            #[inline]
            fn finite(&self) -> bool {
                Float::is_finite(*self)
            }
        }
    };
}

impl_scalar_for_real!(f32);
impl_scalar_for_real!(f64);

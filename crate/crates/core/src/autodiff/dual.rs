//! Dual numbers for forward-mode differentiation.
//!
//! `Dual { primal: a, tangent: a' }` represents `a + a'ε` with `ε² = 0`, so
//! products obey `(ab)' = a'b + ab'` and every supported primitive applies
//! the chain rule through its closed-form derivative.

use std::ops::{Add, Mul, Neg, Sub};

use crate::nn::Activation;
use crate::scalar::{Real, Scalar};

#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct Dual<T> {
    pub primal: T,
    pub tangent: T,
}

impl<T: Real> Dual<T> {
    pub fn new(primal: T, tangent: T) -> Self {
        Self { primal, tangent }
    }

    /// A constant: zero tangent.
    pub fn constant(primal: T) -> Self {
        Self::new(primal, T::zero())
    }

    /// Seed pairing `values` with direction `tangents`.
    pub fn seed(values: &[T], tangents: &[T]) -> Vec<Self> {
        values
            .iter()
            .zip(tangents)
            .map(|(&p, &t)| Self::new(p, t))
            .collect()
    }
}

impl<T: Real> Add for Dual<T> {
    type Output = Self;
    #[inline]
    fn add(self, rhs: Self) -> Self {
        Self::new(self.primal + rhs.primal, self.tangent + rhs.tangent)
    }
}

impl<T: Real> Sub for Dual<T> {
    type Output = Self;
    #[inline]
    fn sub(self, rhs: Self) -> Self {
        Self::new(self.primal - rhs.primal, self.tangent - rhs.tangent)
    }
}

impl<T: Real> Mul for Dual<T> {
    type Output = Self;
    #[inline]
    fn mul(self, rhs: Self) -> Self {
        Self::new(
            self.primal * rhs.primal,
            self.primal * rhs.tangent + self.tangent * rhs.primal,
        )
    }
}

impl<T: Real> Neg for Dual<T> {
    type Output = Self;
    #[inline]
    fn neg(self) -> Self {
        Self::new(-self.primal, -self.tangent)
    }
}

impl<T: Real> Scalar<T> for Dual<T> {
    #[inline]
    fn lift(v: T) -> Self {
        Self::constant(v)
    }

    #[inline]
    fn primal(&self) -> T {
        self.primal
    }

    #[inline]
    fn scale(self, k: T) -> Self {
        Self::new(self.primal * k, self.tangent * k)
    }

    #[inline]
    fn mul_add_const(self, k: T, z: Self) -> Self {
        Self::new(self.primal + k * z.primal, self.tangent + k * z.tangent)
    }

    #[inline]
    fn sine(self) -> Self {
        let (s, c) = self.primal.sin_cos();
        Self::new(s, self.tangent * c)
    }

    #[inline]
    fn cosine(self) -> Self {
        let (s, c) = self.primal.sin_cos();
        Self::new(c, -(self.tangent * s))
    }

    #[inline]
    fn square(self) -> Self {
        let two = T::one() + T::one();
        Self::new(self.primal * self.primal, two * self.primal * self.tangent)
    }

    #[inline]
    fn activate(self, kind: Activation) -> Self {
        Self::new(kind.eval(self.primal), kind.deriv(self.primal) * self.tangent)
    }

    fn finite(&self) -> bool {
        self.primal.is_finite() && self.tangent.is_finite()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn product_rule() {
        let a = Dual::new(3.0, 2.0);
        let b = Dual::new(-1.5, 0.5);
        let p = a * b;
        assert_eq!(p.primal, -4.5);
        assert_eq!(p.tangent, 3.0 * 0.5 + 2.0 * -1.5);
    }

    #[test]
    fn zero_tangent_behaves_like_real() {
        let xs = [-2.0, -0.3, 0.0, 0.7, 4.1];
        for &x in xs.iter() {
            let x: f64 = x;
            let d = Dual::constant(x);
            for kind in [Activation::Tanh, Activation::Silu, Activation::Linear] {
                let y = d.activate(kind);
                assert_eq!(y.primal, kind.eval(x));
                assert_eq!(y.tangent, 0.0);
            }
            assert_eq!(Scalar::sine(d).primal, x.sin());
            assert_eq!(Scalar::sine(d).tangent, 0.0);
            assert_eq!(Scalar::cosine(d).primal, x.cos());
            assert_eq!(d.square().primal, x * x);
            assert_eq!(d.mul_add_const(2.5, d).primal, x + 2.5 * x);
        }
    }

    #[test]
    fn square_at_three() {
        let y = Dual::new(3.0, 1.0).square();
        assert_eq!((y.primal, y.tangent), (9.0, 6.0));
    }
}

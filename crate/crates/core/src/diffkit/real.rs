//! Scalar element types the tape can carry: plain `f64` and first-order
//! dual numbers.

use std::fmt::Debug;
use std::ops::{Add, Div, Mul, Neg, Sub};

use ndarray::{LinalgScalar, ScalarOperand};
use num_traits::{One, Zero};

/// Element type of a recorded computation.
///
/// Comparisons (`clip`, `sign`, `abs`) look at the primal part only.
pub trait Real: LinalgScalar + ScalarOperand + Neg<Output = Self> + Debug + Send + Sync {
    fn from_f64(v: f64) -> Self;
    fn primal(self) -> f64;
    fn tanh(self) -> Self;
    fn exp(self) -> Self;
    fn sin(self) -> Self;
    fn cos(self) -> Self;
    fn abs(self) -> Self;
    /// Sign of the primal with `sign(0) == 0`. Carries no tangent.
    fn sign(self) -> Self;
    fn is_finite(self) -> bool;
}

/// `sign` with the zero convention used throughout the crate.
#[inline]
pub fn sign0(v: f64) -> f64 {
    if v > 0.0 {
        1.0
    } else if v < 0.0 {
        -1.0
    } else {
        0.0
    }
}

impl Real for f64 {
    #[inline]
    fn from_f64(v: f64) -> Self {
        v
    }
    #[inline]
    fn primal(self) -> f64 {
        self
    }
    #[inline]
    fn tanh(self) -> Self {
        f64::tanh(self)
    }
    #[inline]
    fn exp(self) -> Self {
        f64::exp(self)
    }
    #[inline]
    fn sin(self) -> Self {
        f64::sin(self)
    }
    #[inline]
    fn cos(self) -> Self {
        f64::cos(self)
    }
    #[inline]
    fn abs(self) -> Self {
        f64::abs(self)
    }
    #[inline]
    fn sign(self) -> Self {
        sign0(self)
    }
    #[inline]
    fn is_finite(self) -> bool {
        f64::is_finite(self)
    }
}

/// Dual number `primal + tangent·ε` with `ε² = 0`.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct Dual {
    pub primal: f64,
    pub tangent: f64,
}

impl Dual {
    pub const fn new(primal: f64, tangent: f64) -> Self {
        Self { primal, tangent }
    }

    pub const fn constant(primal: f64) -> Self {
        Self { primal, tangent: 0.0 }
    }
}

impl Add for Dual {
    type Output = Dual;
    #[inline]
    fn add(self, rhs: Dual) -> Dual {
        Dual::new(self.primal + rhs.primal, self.tangent + rhs.tangent)
    }
}

impl Sub for Dual {
    type Output = Dual;
    #[inline]
    fn sub(self, rhs: Dual) -> Dual {
        Dual::new(self.primal - rhs.primal, self.tangent - rhs.tangent)
    }
}

impl Mul for Dual {
    type Output = Dual;
    #[inline]
    fn mul(self, rhs: Dual) -> Dual {
        Dual::new(
            self.primal * rhs.primal,
            self.tangent * rhs.primal + self.primal * rhs.tangent,
        )
    }
}

impl Div for Dual {
    type Output = Dual;
    #[inline]
    fn div(self, rhs: Dual) -> Dual {
        let q = self.primal / rhs.primal;
        Dual::new(q, (self.tangent - q * rhs.tangent) / rhs.primal)
    }
}

impl Neg for Dual {
    type Output = Dual;
    #[inline]
    fn neg(self) -> Dual {
        Dual::new(-self.primal, -self.tangent)
    }
}

impl Zero for Dual {
    fn zero() -> Self {
        Dual::constant(0.0)
    }
    fn is_zero(&self) -> bool {
        self.primal == 0.0 && self.tangent == 0.0
    }
}

impl One for Dual {
    fn one() -> Self {
        Dual::constant(1.0)
    }
}

impl ScalarOperand for Dual {}

impl Real for Dual {
    #[inline]
    fn from_f64(v: f64) -> Self {
        Dual::constant(v)
    }
    #[inline]
    fn primal(self) -> f64 {
        self.primal
    }
    #[inline]
    fn tanh(self) -> Self {
        let t = self.primal.tanh();
        Dual::new(t, self.tangent * (1.0 - t * t))
    }
    #[inline]
    fn exp(self) -> Self {
        let e = self.primal.exp();
        Dual::new(e, self.tangent * e)
    }
    #[inline]
    fn sin(self) -> Self {
        Dual::new(self.primal.sin(), self.tangent * self.primal.cos())
    }
    #[inline]
    fn cos(self) -> Self {
        Dual::new(self.primal.cos(), -self.tangent * self.primal.sin())
    }
    #[inline]
    fn abs(self) -> Self {
        let s = sign0(self.primal);
        Dual::new(self.primal.abs(), self.tangent * s)
    }
    #[inline]
    fn sign(self) -> Self {
        Dual::constant(sign0(self.primal))
    }
    #[inline]
    fn is_finite(self) -> bool {
        self.primal.is_finite() && self.tangent.is_finite()
    }
}

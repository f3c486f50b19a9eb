//! Second-order forward mode for small dense blocks.
//!
//! A [`Hyper`] carries the value, gradient and Hessian with respect to `N`
//! seeded inputs. Cost grows as `N^2` per operation, so it is meant for
//! functions of a handful of variables.

use std::ops::{Add, AddAssign, Div, Mul, Neg, Sub};

use super::{Primitive, Scalar};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Hyper<const N: usize> {
    pub value: f64,
    pub grad: [f64; N],
    pub hess: [[f64; N]; N],
    pub fault: Option<Primitive>,
}

impl<const N: usize> Hyper<N> {
    pub fn constant(value: f64) -> Self {
        Self {
            value,
            grad: [0.0; N],
            hess: [[0.0; N]; N],
            fault: None,
        }
    }

    pub fn variable(value: f64, k: usize) -> Self {
        let mut h = Self::constant(value);
        h.grad[k] = 1.0;
        h
    }

    fn has_deriv(&self) -> bool {
        self.grad.iter().any(|&g| g != 0.0)
    }

    /// Applies a unary function with value `v`, first derivative `d1` and
    /// second derivative `d2`.
    #[inline]
    fn chain(self, v: f64, d1: f64, d2: f64) -> Self {
        let mut out = Self {
            value: v,
            grad: self.grad,
            hess: self.hess,
            fault: self.fault,
        };
        for i in 0..N {
            out.grad[i] *= d1;
            for j in 0..N {
                out.hess[i][j] = d1 * self.hess[i][j] + d2 * self.grad[i] * self.grad[j];
            }
        }
        out
    }

    fn faulted(mut self, op: Primitive) -> Self {
        self.value = f64::NAN;
        if self.fault.is_none() {
            self.fault = Some(op);
        }
        self
    }

    fn sqrt_as(self, op: Primitive) -> Self {
        let kink = match op {
            Primitive::Norm => self.value == 0.0,
            _ => self.value == 0.0 && self.has_deriv(),
        };
        if self.value < 0.0 || kink {
            return self.faulted(op);
        }
        let r = self.value.sqrt();
        if r == 0.0 {
            return self.chain(0.0, 0.0, 0.0);
        }
        self.chain(r, 0.5 / r, -0.25 / (r * self.value))
    }

    fn recip(self) -> Self {
        if self.value == 0.0 {
            return self.faulted(Primitive::Div);
        }
        let inv = 1.0 / self.value;
        self.chain(inv, -inv * inv, 2.0 * inv * inv * inv)
    }
}

impl<const N: usize> Add for Hyper<N> {
    type Output = Self;
    fn add(mut self, rhs: Self) -> Self {
        self.value += rhs.value;
        for i in 0..N {
            self.grad[i] += rhs.grad[i];
            for j in 0..N {
                self.hess[i][j] += rhs.hess[i][j];
            }
        }
        self.fault = self.fault.or(rhs.fault);
        self
    }
}

impl<const N: usize> AddAssign for Hyper<N> {
    fn add_assign(&mut self, rhs: Self) {
        *self = *self + rhs;
    }
}

impl<const N: usize> Sub for Hyper<N> {
    type Output = Self;
    fn sub(self, rhs: Self) -> Self {
        self + (-rhs)
    }
}

impl<const N: usize> Mul for Hyper<N> {
    type Output = Self;
    fn mul(self, rhs: Self) -> Self {
        let (a, b) = (self.value, rhs.value);
        let mut out = Self::constant(a * b);
        for i in 0..N {
            out.grad[i] = self.grad[i] * b + a * rhs.grad[i];
            for j in 0..N {
                out.hess[i][j] =
                    self.hess[i][j] * b + a * rhs.hess[i][j] + self.grad[i] * rhs.grad[j] + rhs.grad[i] * self.grad[j];
            }
        }
        out.fault = self.fault.or(rhs.fault);
        out
    }
}

impl<const N: usize> Div for Hyper<N> {
    type Output = Self;
    fn div(self, rhs: Self) -> Self {
        if rhs.value == 0.0 {
            let mut out = self;
            out.fault = self.fault.or(rhs.fault);
            return out.faulted(Primitive::Div);
        }
        self * rhs.recip()
    }
}

impl<const N: usize> Neg for Hyper<N> {
    type Output = Self;
    fn neg(self) -> Self {
        self.chain(-self.value, -1.0, 0.0)
    }
}

impl<const N: usize> Add<f64> for Hyper<N> {
    type Output = Self;
    fn add(mut self, rhs: f64) -> Self {
        self.value += rhs;
        self
    }
}

impl<const N: usize> Sub<f64> for Hyper<N> {
    type Output = Self;
    fn sub(mut self, rhs: f64) -> Self {
        self.value -= rhs;
        self
    }
}

impl<const N: usize> Mul<f64> for Hyper<N> {
    type Output = Self;
    fn mul(self, rhs: f64) -> Self {
        self.chain(self.value * rhs, rhs, 0.0)
    }
}

impl<const N: usize> Div<f64> for Hyper<N> {
    type Output = Self;
    fn div(self, rhs: f64) -> Self {
        if rhs == 0.0 {
            return self.faulted(Primitive::Div);
        }
        self.chain(self.value / rhs, 1.0 / rhs, 0.0)
    }
}

impl<const N: usize> Scalar for Hyper<N> {
    fn cst(v: f64) -> Self {
        Self::constant(v)
    }
    fn value(&self) -> f64 {
        self.value
    }
    fn sqrt(self) -> Self {
        self.sqrt_as(Primitive::Sqrt)
    }
    fn norm_sqrt(self) -> Self {
        self.sqrt_as(Primitive::Norm)
    }
    fn tanh(self) -> Self {
        let t = self.value.tanh();
        let s = 1.0 - t * t;
        self.chain(t, s, -2.0 * t * s)
    }
    fn exp(self) -> Self {
        let e = self.value.exp();
        self.chain(e, e, e)
    }
    fn powi(self, n: i32) -> Self {
        if n == 0 {
            return Self::constant(1.0);
        }
        if n < 0 && self.value == 0.0 {
            return self.faulted(Primitive::Pow);
        }
        let x = self.value;
        let nf = n as f64;
        self.chain(x.powi(n), nf * x.powi(n - 1), nf * (nf - 1.0) * x.powi(n - 2))
    }
    fn powf(self, p: f64) -> Self {
        if self.value < 0.0 || (self.value == 0.0 && p < 2.0 && self.has_deriv()) {
            return self.faulted(Primitive::Pow);
        }
        let x = self.value;
        if x == 0.0 {
            return self.chain(0.0, 0.0, 0.0);
        }
        self.chain(x.powf(p), p * x.powf(p - 1.0), p * (p - 1.0) * x.powf(p - 2.0))
    }
    fn guarded_min(self, other: Self) -> Self {
        if other.value < self.value {
            other
        } else {
            self
        }
    }
    fn guarded_max(self, other: Self) -> Self {
        if other.value > self.value {
            other
        } else {
            self
        }
    }
    fn fault(&self) -> Option<Primitive> {
        self.fault
    }
}

/// Value, gradient and Hessian of a scalar function of `N` inputs.
pub fn hessian<const N: usize, G>(g: G, x: &[f64; N]) -> Result<(f64, [f64; N], [[f64; N]; N]), Primitive>
where
    G: Fn(&[Hyper<N>; N]) -> Hyper<N>,
{
    let vars: [Hyper<N>; N] = std::array::from_fn(|k| Hyper::variable(x[k], k));
    let out = g(&vars);
    if let Some(op) = out.fault {
        return Err(op);
    }
    if !out.value.is_finite() {
        return Err(Primitive::NonFinite);
    }
    Ok((out.value, out.grad, out.hess))
}

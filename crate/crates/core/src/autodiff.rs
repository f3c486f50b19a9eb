//! Forward-mode automatic differentiation.
//!
//! Functions that need derivatives are written once, generically over
//! [`Scalar`], and evaluated either on plain `f64` or on [`Dual`] numbers
//! carrying `W` directional derivatives at a time. A full Jacobian of an
//! `m`-input function takes `ceil(m / W)` forward sweeps; the sweeps are
//! independent and run on the rayon pool when the `parallel` feature is on.
//!
//! Domain violations (division by zero, square root of a negative number,
//! the norm of a zero vector under differentiation) do not silently produce
//! NaNs. The offending primitive is recorded on the dual number, propagated
//! through the rest of the computation and reported as an [`EvalFault`].

use std::fmt::Debug;
use std::ops::{Add, AddAssign, Div, Mul, Neg, Sub};

use nalgebra::DMatrix;
use thiserror::Error;

mod hyper;
pub use hyper::{hessian, Hyper};

/// Primitive operations that can fault.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Primitive {
    Div,
    Sqrt,
    Norm,
    Pow,
    /// A plain `f64` evaluation produced a non-finite value.
    NonFinite,
}

impl std::fmt::Display for Primitive {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let s = match self {
            Primitive::Div => "division by zero",
            Primitive::Sqrt => "sqrt of non-positive argument",
            Primitive::Norm => "norm of zero vector",
            Primitive::Pow => "pow outside its domain",
            Primitive::NonFinite => "non-finite value",
        };
        f.write_str(s)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Error)]
#[error("evaluation fault in output {output}: {op}")]
pub struct EvalFault {
    pub op: Primitive,
    /// Index of the first faulted output component.
    pub output: usize,
}

/// Real-number interface shared by `f64` and [`Dual`].
pub trait Scalar:
    Copy
    + Debug
    + Send
    + Sync
    + Add<Output = Self>
    + Sub<Output = Self>
    + Mul<Output = Self>
    + Div<Output = Self>
    + Neg<Output = Self>
    + AddAssign
    + Add<f64, Output = Self>
    + Sub<f64, Output = Self>
    + Mul<f64, Output = Self>
    + Div<f64, Output = Self>
{
    fn cst(v: f64) -> Self;
    fn value(&self) -> f64;
    fn sqrt(self) -> Self;
    /// Square root used for Euclidean norms; faults as [`Primitive::Norm`].
    fn norm_sqrt(self) -> Self;
    fn tanh(self) -> Self;
    fn exp(self) -> Self;
    fn powi(self, n: i32) -> Self;
    fn powf(self, p: f64) -> Self;
    /// Smaller of the two operands, derivative taken from the selected branch.
    fn guarded_min(self, other: Self) -> Self;
    fn guarded_max(self, other: Self) -> Self;
    /// The primitive that faulted somewhere upstream, if any.
    fn fault(&self) -> Option<Primitive>;

    fn zero() -> Self {
        Self::cst(0.0)
    }
}

impl Scalar for f64 {
    #[inline]
    fn cst(v: f64) -> Self {
        v
    }
    #[inline]
    fn value(&self) -> f64 {
        *self
    }
    #[inline]
    fn sqrt(self) -> Self {
        f64::sqrt(self)
    }
    #[inline]
    fn norm_sqrt(self) -> Self {
        f64::sqrt(self)
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
    fn powi(self, n: i32) -> Self {
        f64::powi(self, n)
    }
    #[inline]
    fn powf(self, p: f64) -> Self {
        f64::powf(self, p)
    }
    #[inline]
    fn guarded_min(self, other: Self) -> Self {
        if other < self {
            other
        } else {
            self
        }
    }
    #[inline]
    fn guarded_max(self, other: Self) -> Self {
        if other > self {
            other
        } else {
            self
        }
    }
    #[inline]
    fn fault(&self) -> Option<Primitive> {
        if self.is_finite() {
            None
        } else {
            Some(Primitive::NonFinite)
        }
    }
}

/// A value with `W` forward-mode directional derivatives.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Dual<const W: usize> {
    pub value: f64,
    pub deriv: [f64; W],
    pub fault: Option<Primitive>,
}

impl<const W: usize> Dual<W> {
    pub fn constant(value: f64) -> Self {
        Self {
            value,
            deriv: [0.0; W],
            fault: None,
        }
    }

    /// A variable seeded along direction `k` of the batch.
    pub fn variable(value: f64, k: usize) -> Self {
        let mut d = Self::constant(value);
        d.deriv[k] = 1.0;
        d
    }

    #[inline]
    fn has_deriv(&self) -> bool {
        self.deriv.iter().any(|&d| d != 0.0)
    }

    /// Applies a unary function with value `v` and local derivative `dv`.
    #[inline]
    fn chain(self, v: f64, dv: f64) -> Self {
        let mut deriv = self.deriv;
        for d in deriv.iter_mut() {
            *d *= dv;
        }
        Self {
            value: v,
            deriv,
            fault: self.fault,
        }
    }

    #[inline]
    fn faulted(mut self, op: Primitive) -> Self {
        self.value = f64::NAN;
        if self.fault.is_none() {
            self.fault = Some(op);
        }
        self
    }

    fn sqrt_as(self, op: Primitive) -> Self {
        let kink = match op {
            // A norm has no derivative at the origin whatever the seed.
            Primitive::Norm => self.value == 0.0,
            _ => self.value == 0.0 && self.has_deriv(),
        };
        if self.value < 0.0 || kink {
            return self.faulted(op);
        }
        let r = self.value.sqrt();
        if r == 0.0 {
            return self.chain(0.0, 0.0);
        }
        self.chain(r, 0.5 / r)
    }
}

#[inline]
fn merge(a: Option<Primitive>, b: Option<Primitive>) -> Option<Primitive> {
    a.or(b)
}

impl<const W: usize> Add for Dual<W> {
    type Output = Self;
    #[inline]
    fn add(self, rhs: Self) -> Self {
        let mut deriv = self.deriv;
        for (d, r) in deriv.iter_mut().zip(rhs.deriv.iter()) {
            *d += r;
        }
        Self {
            value: self.value + rhs.value,
            deriv,
            fault: merge(self.fault, rhs.fault),
        }
    }
}

impl<const W: usize> AddAssign for Dual<W> {
    #[inline]
    fn add_assign(&mut self, rhs: Self) {
        *self = *self + rhs;
    }
}

impl<const W: usize> Sub for Dual<W> {
    type Output = Self;
    #[inline]
    fn sub(self, rhs: Self) -> Self {
        let mut deriv = self.deriv;
        for (d, r) in deriv.iter_mut().zip(rhs.deriv.iter()) {
            *d -= r;
        }
        Self {
            value: self.value - rhs.value,
            deriv,
            fault: merge(self.fault, rhs.fault),
        }
    }
}

impl<const W: usize> Mul for Dual<W> {
    type Output = Self;
    #[inline]
    fn mul(self, rhs: Self) -> Self {
        let mut deriv = [0.0; W];
        for k in 0..W {
            deriv[k] = self.deriv[k] * rhs.value + self.value * rhs.deriv[k];
        }
        Self {
            value: self.value * rhs.value,
            deriv,
            fault: merge(self.fault, rhs.fault),
        }
    }
}

impl<const W: usize> Div for Dual<W> {
    type Output = Self;
    #[inline]
    fn div(self, rhs: Self) -> Self {
        if rhs.value == 0.0 {
            let mut out = self;
            out.fault = merge(self.fault, rhs.fault);
            return out.faulted(Primitive::Div);
        }
        let inv = 1.0 / rhs.value;
        let q = self.value * inv;
        let mut deriv = [0.0; W];
        for k in 0..W {
            deriv[k] = (self.deriv[k] - q * rhs.deriv[k]) * inv;
        }
        Self {
            value: q,
            deriv,
            fault: merge(self.fault, rhs.fault),
        }
    }
}

impl<const W: usize> Neg for Dual<W> {
    type Output = Self;
    #[inline]
    fn neg(self) -> Self {
        self.chain(-self.value, -1.0)
    }
}

impl<const W: usize> Add<f64> for Dual<W> {
    type Output = Self;
    #[inline]
    fn add(mut self, rhs: f64) -> Self {
        self.value += rhs;
        self
    }
}

impl<const W: usize> Sub<f64> for Dual<W> {
    type Output = Self;
    #[inline]
    fn sub(mut self, rhs: f64) -> Self {
        self.value -= rhs;
        self
    }
}

impl<const W: usize> Mul<f64> for Dual<W> {
    type Output = Self;
    #[inline]
    fn mul(self, rhs: f64) -> Self {
        self.chain(self.value * rhs, rhs)
    }
}

impl<const W: usize> Div<f64> for Dual<W> {
    type Output = Self;
    #[inline]
    fn div(self, rhs: f64) -> Self {
        if rhs == 0.0 {
            return self.faulted(Primitive::Div);
        }
        self.chain(self.value / rhs, 1.0 / rhs)
    }
}

impl<const W: usize> Scalar for Dual<W> {
    #[inline]
    fn cst(v: f64) -> Self {
        Self::constant(v)
    }
    #[inline]
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
        self.chain(t, 1.0 - t * t)
    }
    fn exp(self) -> Self {
        let e = self.value.exp();
        self.chain(e, e)
    }
    fn powi(self, n: i32) -> Self {
        if n == 0 {
            return Self::constant(1.0);
        }
        if n < 0 && self.value == 0.0 {
            return self.faulted(Primitive::Pow);
        }
        let v = self.value.powi(n);
        self.chain(v, n as f64 * self.value.powi(n - 1))
    }
    fn powf(self, p: f64) -> Self {
        if self.value < 0.0 || (self.value == 0.0 && p < 1.0 && self.has_deriv()) {
            return self.faulted(Primitive::Pow);
        }
        let v = self.value.powf(p);
        let dv = if self.value == 0.0 {
            0.0
        } else {
            p * self.value.powf(p - 1.0)
        };
        self.chain(v, dv)
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

/// A vector-valued function written once for every [`Scalar`].
pub trait VectorFn: Sync {
    fn eval<S: Scalar>(&self, x: &[S], out: &mut Vec<S>);
}

/// Values and dense Jacobian (`outputs x inputs`) of a function.
#[derive(Debug, Clone)]
pub struct Jacobian {
    pub values: Vec<f64>,
    pub matrix: DMatrix<f64>,
}

fn check_outputs<S: Scalar>(out: &[S]) -> Result<(), EvalFault> {
    for (i, o) in out.iter().enumerate() {
        if let Some(op) = o.fault() {
            return Err(EvalFault { op, output: i });
        }
        if !o.value().is_finite() {
            return Err(EvalFault {
                op: Primitive::NonFinite,
                output: i,
            });
        }
    }
    Ok(())
}

/// Plain evaluation with the same fault reporting as the differentiated path.
pub fn evaluate<F: VectorFn>(f: &F, x: &[f64], out: &mut Vec<f64>) -> Result<(), EvalFault> {
    out.clear();
    f.eval(x, out);
    check_outputs(out)
}

fn sweep<const W: usize, G>(g: &G, x: &[f64], chunk: usize) -> Vec<Dual<W>>
where
    G: Fn(&[Dual<W>]) -> Vec<Dual<W>>,
{
    let start = chunk * W;
    let seeded: Vec<Dual<W>> = x
        .iter()
        .enumerate()
        .map(|(j, &v)| {
            if j >= start && j < start + W {
                Dual::variable(v, j - start)
            } else {
                Dual::constant(v)
            }
        })
        .collect();
    g(&seeded)
}

fn assemble_jacobian<const W: usize>(m: usize, sweeps: Vec<Vec<Dual<W>>>) -> Result<Jacobian, EvalFault> {
    let rows = sweeps.first().map_or(0, |s| s.len());
    let mut matrix = DMatrix::zeros(rows, m);
    for (chunk, outputs) in sweeps.iter().enumerate() {
        check_outputs(outputs)?;
        let start = chunk * W;
        let width = W.min(m - start);
        for (i, o) in outputs.iter().enumerate() {
            for k in 0..width {
                matrix[(i, start + k)] = o.deriv[k];
            }
        }
    }
    let values = match sweeps.first() {
        Some(s) => s.iter().map(|d| d.value).collect(),
        None => Vec::new(),
    };
    Ok(Jacobian { values, matrix })
}

/// Jacobian of a closure over `Dual<W>`, computed sweep by sweep.
pub fn jacobian_fn_seq<const W: usize, G>(g: G, x: &[f64]) -> Result<Jacobian, EvalFault>
where
    G: Fn(&[Dual<W>]) -> Vec<Dual<W>>,
{
    assert!(W > 0, "seed batch width must be positive");
    let chunks = x.len().div_ceil(W).max(1);
    let sweeps = (0..chunks).map(|c| sweep(&g, x, c)).collect();
    assemble_jacobian(x.len(), sweeps)
}

/// Jacobian of a closure over `Dual<W>` with the sweeps spread over rayon.
#[cfg(feature = "parallel")]
pub fn jacobian_fn_par<const W: usize, G>(g: G, x: &[f64]) -> Result<Jacobian, EvalFault>
where
    G: Fn(&[Dual<W>]) -> Vec<Dual<W>> + Sync,
{
    use rayon::prelude::*;
    assert!(W > 0, "seed batch width must be positive");
    let chunks = x.len().div_ceil(W).max(1);
    let sweeps = (0..chunks).into_par_iter().map(|c| sweep(&g, x, c)).collect();
    assemble_jacobian(x.len(), sweeps)
}

/// Sweeps below this count run inline; the thread hand-off costs more than
/// a handful of sweeps over the planner's small constraint sets.
pub const PARALLEL_MIN_SWEEPS: usize = 32;

/// Jacobian of a closure, parallel over sweeps when there are enough of them.
pub fn jacobian_fn<const W: usize, G>(g: G, x: &[f64]) -> Result<Jacobian, EvalFault>
where
    G: Fn(&[Dual<W>]) -> Vec<Dual<W>> + Sync,
{
    #[cfg(feature = "parallel")]
    if x.len().div_ceil(W.max(1)) >= PARALLEL_MIN_SWEEPS {
        return jacobian_fn_par(g, x);
    }
    jacobian_fn_seq(g, x)
}

/// Jacobian of a [`VectorFn`] using seed batches of width `W`.
pub fn jacobian<const W: usize, F: VectorFn>(f: &F, x: &[f64]) -> Result<Jacobian, EvalFault> {
    jacobian_fn::<W, _>(
        |xs: &[Dual<W>]| {
            let mut out = Vec::new();
            f.eval(xs, &mut out);
            out
        },
        x,
    )
}

/// Sequential counterpart of [`jacobian`], always single-threaded.
pub fn jacobian_seq<const W: usize, F: VectorFn>(f: &F, x: &[f64]) -> Result<Jacobian, EvalFault> {
    jacobian_fn_seq::<W, _>(
        |xs: &[Dual<W>]| {
            let mut out = Vec::new();
            f.eval(xs, &mut out);
            out
        },
        x,
    )
}

#[cfg(feature = "parallel")]
pub fn jacobian_par<const W: usize, F: VectorFn>(f: &F, x: &[f64]) -> Result<Jacobian, EvalFault> {
    jacobian_fn_par::<W, _>(
        |xs: &[Dual<W>]| {
            let mut out = Vec::new();
            f.eval(xs, &mut out);
            out
        },
        x,
    )
}

/// Gradient of a scalar function written generically.
pub fn gradient<const W: usize, G>(g: G, x: &[f64]) -> Result<(f64, Vec<f64>), EvalFault>
where
    G: Fn(&[Dual<W>]) -> Dual<W> + Sync,
{
    let jac = jacobian_fn::<W, _>(|xs: &[Dual<W>]| vec![g(xs)], x)?;
    let grad = jac.matrix.row(0).iter().copied().collect();
    Ok((jac.values[0], grad))
}

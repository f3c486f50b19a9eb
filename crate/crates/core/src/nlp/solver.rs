//! Bound-constrained augmented Lagrangian solver.
//!
//! Solves `min f(x)` subject to `c_E(x) = 0`, `c_I(x) <= 0`, `lo <= x <= hi`.
//! Inequalities enter through the usual slack-eliminated (PHR) penalty. Each
//! subproblem is minimised by a projected Newton-type method whose model
//! Hessian is `H + rho * J_a^T J_a`: the penalty curvature is formed exactly
//! from the active constraint rows and `H` is the Lagrangian Hessian when the
//! problem supplies one, otherwise a damped BFGS estimate kept across
//! subproblems. Indefinite models are shifted until they factor. First
//! derivatives come from forward-mode AD.

use nalgebra::{Cholesky, DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::autodiff::{self, Dual, EvalFault, Scalar, VectorFn};

/// Seed-batch width for the constraint Jacobian.
pub const SEED_WIDTH: usize = 8;

/// A smooth NLP with box bounds. Constraint rows are laid out equalities first.
pub trait ConstrainedProblem: Sync {
    fn dim(&self) -> usize;
    fn n_eq(&self) -> usize;
    fn n_ineq(&self) -> usize;
    fn lower(&self) -> &[f64];
    fn upper(&self) -> &[f64];
    fn cost<S: Scalar>(&self, x: &[S]) -> S;
    fn constraints<S: Scalar>(&self, x: &[S], out: &mut Vec<S>);

    /// Hessian of `f + sum_r w_r c_r` at `x`, for problems that can form it
    /// cheaply. `None` makes the solver fall back to a quasi-Newton estimate.
    fn lagrangian_hessian(&self, _x: &[f64], _w: &[f64]) -> Option<DMatrix<f64>> {
        None
    }
}

struct ConstraintFn<'a, P>(&'a P);

impl<P: ConstrainedProblem> VectorFn for ConstraintFn<'_, P> {
    fn eval<S: Scalar>(&self, x: &[S], out: &mut Vec<S>) {
        self.0.constraints(x, out);
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SolverParams {
    #[serde(default = "d_tol")]
    pub tol_eq: f64,
    #[serde(default = "d_tol")]
    pub tol_ineq: f64,
    #[serde(default = "d_tol_bound")]
    pub tol_bound: f64,
    #[serde(default = "d_tol_stat")]
    pub tol_stationarity: f64,
    #[serde(default = "d_outer")]
    pub max_outer_iters: usize,
    #[serde(default = "d_inner")]
    pub max_inner_iters: usize,
    #[serde(default = "d_penalty")]
    pub initial_penalty: f64,
    #[serde(default = "d_growth")]
    pub penalty_growth: f64,
    /// Lower bound on the maneuver time, seconds.
    #[serde(default = "d_dt_min")]
    pub dt_min: f64,
}

fn d_tol() -> f64 {
    1e-6
}
fn d_tol_bound() -> f64 {
    1e-9
}
fn d_tol_stat() -> f64 {
    1e-5
}
fn d_outer() -> usize {
    40
}
fn d_inner() -> usize {
    150
}
fn d_penalty() -> f64 {
    10.0
}
fn d_growth() -> f64 {
    10.0
}
fn d_dt_min() -> f64 {
    0.1
}

impl Default for SolverParams {
    fn default() -> Self {
        Self {
            tol_eq: d_tol(),
            tol_ineq: d_tol(),
            tol_bound: d_tol_bound(),
            tol_stationarity: d_tol_stat(),
            max_outer_iters: d_outer(),
            max_inner_iters: d_inner(),
            initial_penalty: d_penalty(),
            penalty_growth: d_growth(),
            dt_min: d_dt_min(),
        }
    }
}

const MAX_PENALTY: f64 = 1e9;
const MAX_MULTIPLIER: f64 = 1e10;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SolveStatus {
    Converged,
    MaxIter,
    InfeasibleDetected,
}

/// First-order optimality residuals, all infinity norms.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct KktResiduals {
    pub eq_violation: f64,
    pub ineq_violation: f64,
    pub stationarity: f64,
    pub complementarity: f64,
}

/// Dual estimates. `bounds` holds the reduced-gradient sign at active bounds.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct Multipliers {
    pub equality: Vec<f64>,
    pub inequality: Vec<f64>,
    pub bounds: Vec<f64>,
    pub penalty: f64,
}

#[derive(Debug, Clone)]
pub struct SolverOutput {
    pub x: Vec<f64>,
    pub cost: f64,
    pub multipliers: Multipliers,
    pub status: SolveStatus,
    pub outer_iterations: usize,
    pub inner_iterations: usize,
    pub kkt: KktResiduals,
    pub fault: Option<EvalFault>,
}

/// Values and first derivatives at one point.
struct Point {
    x: Vec<f64>,
    f: f64,
    grad_f: Vec<f64>,
    c: Vec<f64>,
    jac: DMatrix<f64>,
}

struct Evaluator<'a, P> {
    p: &'a P,
    n_eq: usize,
    scratch: Vec<f64>,
}

impl<'a, P: ConstrainedProblem> Evaluator<'a, P> {
    fn new(p: &'a P) -> Self {
        Self {
            p,
            n_eq: p.n_eq(),
            scratch: Vec::new(),
        }
    }

    fn full(&self, x: &[f64]) -> Result<Point, EvalFault> {
        let jac = autodiff::jacobian::<SEED_WIDTH, _>(&ConstraintFn(self.p), x)?;
        let (f, grad_f) = autodiff::gradient::<SEED_WIDTH, _>(|v: &[Dual<SEED_WIDTH>]| self.p.cost(v), x)?;
        Ok(Point {
            x: x.to_vec(),
            f,
            grad_f,
            c: jac.values,
            jac: jac.matrix,
        })
    }

    /// Augmented Lagrangian value only; `None` on an evaluation fault.
    fn merit(&mut self, x: &[f64], lam: &[f64], mu: &[f64], rho: f64) -> Option<f64> {
        let f = self.p.cost(x);
        if !f.is_finite() {
            return None;
        }
        autodiff::evaluate(&ConstraintFn(self.p), x, &mut self.scratch).ok()?;
        Some(f + penalty_terms(&self.scratch, self.n_eq, lam, mu, rho))
    }
}

fn penalty_terms(c: &[f64], n_eq: usize, lam: &[f64], mu: &[f64], rho: f64) -> f64 {
    let mut v = 0.0;
    for (ci, li) in c[..n_eq].iter().zip(lam) {
        v += li * ci + 0.5 * rho * ci * ci;
    }
    for (gi, mi) in c[n_eq..].iter().zip(mu) {
        let s = (mi + rho * gi).max(0.0);
        v += (s * s - mi * mi) / (2.0 * rho);
    }
    v
}

/// Weights `w` with `grad phi = grad f + J^T w`.
fn row_weights(c: &[f64], n_eq: usize, lam: &[f64], mu: &[f64], rho: f64) -> Vec<f64> {
    let mut w = Vec::with_capacity(c.len());
    for (ci, li) in c[..n_eq].iter().zip(lam) {
        w.push(li + rho * ci);
    }
    for (gi, mi) in c[n_eq..].iter().zip(mu) {
        w.push((mi + rho * gi).max(0.0));
    }
    w
}

fn lagrangian_gradient(pt: &Point, w: &[f64]) -> Vec<f64> {
    let mut g = pt.grad_f.clone();
    let jt_w = pt.jac.tr_mul(&DVector::from_column_slice(w));
    for (gi, v) in g.iter_mut().zip(jt_w.iter()) {
        *gi += v;
    }
    g
}

fn projected_gradient_norm(x: &[f64], g: &[f64], lo: &[f64], hi: &[f64]) -> f64 {
    let mut m: f64 = 0.0;
    for i in 0..x.len() {
        if lo[i] == hi[i] {
            continue;
        }
        let step = x[i] - (x[i] - g[i]).clamp(lo[i], hi[i]);
        m = m.max(step.abs());
    }
    m
}

fn project(x: &mut [f64], lo: &[f64], hi: &[f64]) {
    for i in 0..x.len() {
        x[i] = x[i].clamp(lo[i], hi[i]);
    }
}

/// Adds `rho * sum_r J_r^T J_r` over the rows with `active[r]`, skipping zeros.
fn add_penalty_curvature(b: &mut DMatrix<f64>, jac: &DMatrix<f64>, active: &[bool], rho: f64) {
    let n = jac.ncols();
    let mut nz: Vec<(usize, f64)> = Vec::with_capacity(n);
    for (r, &on) in active.iter().enumerate() {
        if !on {
            continue;
        }
        nz.clear();
        for c in 0..n {
            let v = jac[(r, c)];
            if v != 0.0 {
                nz.push((c, v));
            }
        }
        for &(i, vi) in &nz {
            for &(j, vj) in &nz {
                b[(i, j)] += rho * vi * vj;
            }
        }
    }
}

/// Damped BFGS update of `m` keeping it positive definite.
fn damped_bfgs(m: &mut DMatrix<f64>, s: &DVector<f64>, y: &DVector<f64>) {
    let ms = &*m * s;
    let sms = s.dot(&ms);
    if !(sms > 1e-16) {
        return;
    }
    let sy = s.dot(y);
    let r = if sy >= 0.2 * sms {
        y.clone()
    } else {
        let theta = 0.8 * sms / (sms - sy);
        y * theta + &ms * (1.0 - theta)
    };
    let sr = s.dot(&r);
    if !(sr > 1e-16) {
        return;
    }
    *m -= (&ms * ms.transpose()) / sms;
    *m += (&r * r.transpose()) / sr;
}

/// Newton-type step `B d = rhs`. A positive definite `B` is solved directly;
/// otherwise eigenvalues are replaced by their magnitudes (floored relative to
/// the largest), so directions of negative curvature are followed downhill
/// rather than damped away.
fn solve_model(b: &DMatrix<f64>, rhs: &DVector<f64>) -> Option<DVector<f64>> {
    if let Some(ch) = Cholesky::new(b.clone()) {
        return Some(ch.solve(rhs));
    }
    let eig = b.clone().symmetric_eigen();
    let top = eig.eigenvalues.iter().fold(0.0f64, |a, v| a.max(v.abs()));
    if !(top.is_finite() && top > 0.0) {
        return None;
    }
    let floor = 1e-8 * top;
    let proj = eig.eigenvectors.tr_mul(rhs);
    let scaled = DVector::from_iterator(
        proj.len(),
        proj.iter()
            .zip(eig.eigenvalues.iter())
            .map(|(p, l)| p / l.abs().max(floor)),
    );
    Some(&eig.eigenvectors * scaled)
}

pub struct WarmStart<'a> {
    pub multipliers: &'a Multipliers,
}

/// Runs the augmented Lagrangian method from `x0`.
///
/// Never panics on numerical trouble: exhausting the iteration budget gives
/// [`SolveStatus::MaxIter`] with the best iterate, and an evaluation fault at
/// an accepted point gives [`SolveStatus::InfeasibleDetected`].
pub fn minimize<P: ConstrainedProblem>(
    p: &P,
    x0: &[f64],
    warm: Option<WarmStart<'_>>,
    params: &SolverParams,
) -> SolverOutput {
    let n = p.dim();
    let (n_eq, n_ineq) = (p.n_eq(), p.n_ineq());
    let (lo, hi) = (p.lower(), p.upper());
    assert_eq!(x0.len(), n, "initial point has wrong dimension");

    let mut x = x0.to_vec();
    project(&mut x, lo, hi);

    let (mut lam, mut mu, mut rho) = match &warm {
        Some(w) if w.multipliers.equality.len() == n_eq && w.multipliers.inequality.len() == n_ineq => (
            w.multipliers.equality.clone(),
            w.multipliers.inequality.iter().map(|m| m.max(0.0)).collect(),
            params.initial_penalty,
        ),
        _ => (vec![0.0; n_eq], vec![0.0; n_ineq], params.initial_penalty),
    };

    let mut ev = Evaluator::new(p);
    let mut pt = match ev.full(&x) {
        Ok(pt) => pt,
        Err(fault) => {
            return SolverOutput {
                x,
                cost: f64::NAN,
                multipliers: Multipliers {
                    equality: lam,
                    inequality: mu,
                    bounds: vec![0.0; n],
                    penalty: rho,
                },
                status: SolveStatus::InfeasibleDetected,
                outer_iterations: 0,
                inner_iterations: 0,
                kkt: KktResiduals::default(),
                fault: Some(fault),
            }
        }
    };

    let sigma0 = 1e-2;
    let mut m = DMatrix::<f64>::identity(n, n) * sigma0;
    let mut inner_total = 0usize;
    let mut inner_tol = 1e-2f64.max(params.tol_stationarity);
    let mut prev_v = f64::INFINITY;
    let mut status = SolveStatus::MaxIter;
    let mut kkt = KktResiduals::default();
    let mut outer = 0usize;
    let fixed: Vec<bool> = (0..n).map(|i| lo[i] == hi[i]).collect();

    while outer < params.max_outer_iters {
        outer += 1;
        // ---- inner: projected quasi-Newton on the augmented Lagrangian ----
        let mut stalls = 0;
        for _ in 0..params.max_inner_iters {
            let w = row_weights(&pt.c, n_eq, &lam, &mu, rho);
            let g = lagrangian_gradient(&pt, &w);
            let pg = projected_gradient_norm(&pt.x, &g, lo, hi);
            if pg <= inner_tol {
                break;
            }
            let phi = pt.f + penalty_terms(&pt.c, n_eq, &lam, &mu, rho);

            let mut active_rows = vec![true; n_eq + n_ineq];
            for (r, a) in active_rows.iter_mut().enumerate().skip(n_eq) {
                *a = w[r] > 0.0;
            }
            let exact = p.lagrangian_hessian(&pt.x, &w);
            let mut bq = m.clone();
            add_penalty_curvature(&mut bq, &pt.jac, &active_rows, rho);
            let be = exact.map(|mut h| {
                add_penalty_curvature(&mut h, &pt.jac, &active_rows, rho);
                h
            });

            let eps = pg.min(1e-3);
            let mut free = Vec::with_capacity(n);
            let mut bound_active = vec![false; n];
            for i in 0..n {
                if fixed[i] {
                    continue;
                }
                let at_lo = pt.x[i] <= lo[i] + eps && g[i] > 0.0;
                let at_hi = pt.x[i] >= hi[i] - eps && g[i] < 0.0;
                if at_lo || at_hi {
                    bound_active[i] = true;
                } else {
                    free.push(i);
                }
            }
            let mut d = vec![0.0; n];
            let mut b = &bq;
            if !free.is_empty() {
                let rhs = DVector::from_iterator(free.len(), free.iter().map(|&i| -g[i]));
                let sub = |b: &DMatrix<f64>| DMatrix::from_fn(free.len(), free.len(), |r, c| b[(free[r], free[c])]);
                let mut step = be.as_ref().and_then(|h| Cholesky::new(sub(h)).map(|ch| ch.solve(&rhs)));
                if step.is_some() {
                    b = be.as_ref().unwrap();
                } else {
                    step = solve_model(&sub(&bq), &rhs);
                }
                match step {
                    Some(sol) => {
                        for (k, &i) in free.iter().enumerate() {
                            d[i] = sol[k];
                        }
                    }
                    None => {
                        for &i in &free {
                            d[i] = -g[i] / bq[(i, i)].abs().max(1e-8);
                        }
                    }
                }
            }
            for i in 0..n {
                if bound_active[i] {
                    d[i] = -g[i] / b[(i, i)].abs().max(1e-8);
                }
            }

            // projected Armijo backtracking
            let mut alpha = 1.0;
            let mut accepted: Option<Vec<f64>> = None;
            for _ in 0..40 {
                let mut xt: Vec<f64> = pt.x.iter().zip(&d).map(|(xi, di)| xi + alpha * di).collect();
                project(&mut xt, lo, hi);
                let slope: f64 = g
                    .iter()
                    .zip(xt.iter().zip(&pt.x))
                    .map(|(gi, (a, b))| gi * (a - b))
                    .sum();
                if slope >= 0.0 {
                    alpha *= 0.5;
                    continue;
                }
                if let Some(phit) = ev.merit(&xt, &lam, &mu, rho) {
                    if phit <= phi + 1e-4 * slope {
                        accepted = Some(xt);
                        break;
                    }
                }
                alpha *= 0.5;
            }
            let Some(xt) = accepted else {
                // Reset the curvature estimate once before giving up on this subproblem.
                stalls += 1;
                m = DMatrix::identity(n, n) * sigma0;
                if stalls > 1 {
                    break;
                }
                continue;
            };
            let new_pt = match ev.full(&xt) {
                Ok(np) => np,
                Err(_) => {
                    stalls += 1;
                    if stalls > 1 {
                        break;
                    }
                    continue;
                }
            };
            inner_total += 1;

            // BFGS on the Lagrangian part, multipliers frozen at the new point.
            let w_new = row_weights(&new_pt.c, n_eq, &lam, &mu, rho);
            let g_new = lagrangian_gradient(&new_pt, &w_new);
            let g_old = lagrangian_gradient(&pt, &w_new);
            let s = DVector::from_iterator(n, new_pt.x.iter().zip(&pt.x).map(|(a, b)| a - b));
            let y = DVector::from_iterator(n, g_new.iter().zip(&g_old).map(|(a, b)| a - b));
            damped_bfgs(&mut m, &s, &y);
            pt = new_pt;
        }

        // ---- outer: multiplier and penalty update ----
        let (c_e, g_i) = pt.c.split_at(n_eq);
        let eq_viol = c_e.iter().fold(0.0f64, |a, v| a.max(v.abs()));
        let ineq_viol = g_i.iter().fold(0.0f64, |a, v| a.max(*v));
        let compl_before = g_i
            .iter()
            .zip(&mu)
            .fold(0.0f64, |a, (gi, mi)| a.max((-gi).min(mi / rho).abs()));
        for (l, ci) in lam.iter_mut().zip(c_e) {
            *l = (*l + rho * ci).clamp(-MAX_MULTIPLIER, MAX_MULTIPLIER);
        }
        for (mi, gi) in mu.iter_mut().zip(g_i) {
            *mi = (*mi + rho * gi).clamp(0.0, MAX_MULTIPLIER);
        }
        let wfull: Vec<f64> = lam.iter().chain(mu.iter()).copied().collect();
        let gl = lagrangian_gradient(&pt, &wfull);
        let stationarity = projected_gradient_norm(&pt.x, &gl, lo, hi);
        let complementarity = g_i
            .iter()
            .zip(&mu)
            .fold(0.0f64, |a, (gi, mi)| a.max((-gi).min(*mi).abs()));
        kkt = KktResiduals {
            eq_violation: eq_viol,
            ineq_violation: ineq_viol.max(0.0),
            stationarity,
            complementarity,
        };
        if eq_viol <= params.tol_eq
            && ineq_viol <= params.tol_ineq
            && stationarity <= params.tol_stationarity
            && complementarity <= params.tol_stationarity
        {
            status = SolveStatus::Converged;
            break;
        }
        let v = eq_viol.max(compl_before);
        if v > 0.25 * prev_v && v > params.tol_eq.min(params.tol_ineq) {
            rho = (rho * params.penalty_growth).min(MAX_PENALTY);
        }
        prev_v = v;
        inner_tol = (inner_tol * 0.1).max(params.tol_stationarity * 0.5);
    }

    let bounds = {
        let gl = lagrangian_gradient(&pt, &lam.iter().chain(mu.iter()).copied().collect::<Vec<_>>());
        (0..n)
            .map(|i| {
                let at_bound = pt.x[i] <= lo[i] + params.tol_bound || pt.x[i] >= hi[i] - params.tol_bound;
                if at_bound {
                    gl[i]
                } else {
                    0.0
                }
            })
            .collect()
    };

    SolverOutput {
        cost: pt.f,
        x: pt.x,
        multipliers: Multipliers {
            equality: lam,
            inequality: mu,
            bounds,
            penalty: rho,
        },
        status,
        outer_iterations: outer,
        inner_iterations: inner_total,
        kkt,
        fault: None,
    }
}

//! Chebyshev–Gauss–Lobatto collocation grid on `[0, 1]`.
//!
//! Nodes are the extrema `cos(pi k / n)` mapped through `tau = (1 + x) / 2` and
//! stored in increasing order so that node index follows time. Interpolation
//! and differentiation both use the barycentric form.

use nalgebra::DMatrix;
use thiserror::Error;

use crate::autodiff::Scalar;
use crate::model::Vec3;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum GridError {
    #[error("polynomial order must be at least 1, got {0}")]
    OrderTooSmall(usize),
    #[error("interpolation point {0} is outside [0, 1]")]
    OutOfRange(f64),
    #[error("expected {expected} node values, got {got}")]
    LengthMismatch { expected: usize, got: usize },
}

#[derive(Debug, Clone, PartialEq)]
pub struct CollocationGrid {
    n: usize,
    nodes: Vec<f64>,
    weights: Vec<f64>,
    diff: DMatrix<f64>,
}

/// `(1 - cos(pi k / n)) / 2`, evaluated so that the grid is exactly symmetric
/// and the endpoints and midpoint are exact.
fn shifted_node(k: usize, n: usize) -> f64 {
    use std::f64::consts::PI;
    if 2 * k == n {
        return 0.5;
    }
    if 2 * k > n {
        return 1.0 - shifted_node(n - k, n);
    }
    let s = (PI * k as f64 / (2.0 * n as f64)).sin();
    s * s
}

pub fn make_grid(n: usize) -> Result<CollocationGrid, GridError> {
    if n < 1 {
        return Err(GridError::OrderTooSmall(n));
    }
    let nodes: Vec<f64> = (0..=n).map(|k| shifted_node(k, n)).collect();
    let weights: Vec<f64> = (0..=n)
        .map(|k| {
            let sign = if k % 2 == 0 { 1.0 } else { -1.0 };
            if k == 0 || k == n {
                0.5 * sign
            } else {
                sign
            }
        })
        .collect();
    let m = n + 1;
    let mut diff = DMatrix::zeros(m, m);
    for r in 0..m {
        let mut row_sum = 0.0;
        for c in 0..m {
            if r != c {
                let v = (weights[c] / weights[r]) / (nodes[r] - nodes[c]);
                diff[(r, c)] = v;
                row_sum += v;
            }
        }
        diff[(r, r)] = -row_sum;
    }
    Ok(CollocationGrid {
        n,
        nodes,
        weights,
        diff,
    })
}

impl CollocationGrid {
    pub fn order(&self) -> usize {
        self.n
    }

    pub fn len(&self) -> usize {
        self.n + 1
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn nodes(&self) -> &[f64] {
        &self.nodes
    }

    pub fn bary_weights(&self) -> &[f64] {
        &self.weights
    }

    /// `D[r][c]` is the derivative of the `c`-th Lagrange basis polynomial at node `r`.
    pub fn diff_matrix(&self) -> &DMatrix<f64> {
        &self.diff
    }

    fn check_len(&self, got: usize) -> Result<(), GridError> {
        if got != self.len() {
            return Err(GridError::LengthMismatch {
                expected: self.len(),
                got,
            });
        }
        Ok(())
    }

    /// Barycentric evaluation of a scalar interpolant.
    pub fn interpolate_scalar(&self, values: &[f64], tau: f64) -> Result<f64, GridError> {
        self.check_len(values.len())?;
        if !(0.0..=1.0).contains(&tau) {
            return Err(GridError::OutOfRange(tau));
        }
        if let Some(i) = self.nodes.iter().position(|&t| t == tau) {
            return Ok(values[i]);
        }
        let (mut num, mut den) = (0.0, 0.0);
        for ((&t, &w), &v) in self.nodes.iter().zip(&self.weights).zip(values) {
            let c = w / (tau - t);
            num += c * v;
            den += c;
        }
        Ok(num / den)
    }

    pub fn interpolate(&self, node_values: &[Vec3], tau: f64) -> Result<Vec3, GridError> {
        self.check_len(node_values.len())?;
        if !(0.0..=1.0).contains(&tau) {
            return Err(GridError::OutOfRange(tau));
        }
        if let Some(i) = self.nodes.iter().position(|&t| t == tau) {
            return Ok(node_values[i]);
        }
        let mut num = Vec3::ZERO;
        let mut den = 0.0;
        for ((&t, &w), &v) in self.nodes.iter().zip(&self.weights).zip(node_values) {
            let c = w / (tau - t);
            num += v * c;
            den += c;
        }
        Ok(num * (1.0 / den))
    }

    /// Derivative (in d/dtau units) of the interpolant at an arbitrary point.
    pub fn interpolate_derivative(&self, node_values: &[Vec3], tau: f64) -> Result<Vec3, GridError> {
        self.check_len(node_values.len())?;
        if !(0.0..=1.0).contains(&tau) {
            return Err(GridError::OutOfRange(tau));
        }
        if let Some(i) = self.nodes.iter().position(|&t| t == tau) {
            return Ok(self.diff_row(i, node_values));
        }
        // p'(x) = sum_j c_j (p(x) - v_j) / (x - x_j) / sum_j c_j, c_j = w_j / (x - x_j)
        let p = self.interpolate(node_values, tau)?;
        let mut num = Vec3::ZERO;
        let mut den = 0.0;
        for ((&t, &w), &v) in self.nodes.iter().zip(&self.weights).zip(node_values) {
            let c = w / (tau - t);
            num += (p - v) * (c / (tau - t));
            den += c;
        }
        Ok(num * (1.0 / den))
    }

    fn diff_row<S: Scalar>(&self, r: usize, node_values: &[Vec3<S>]) -> Vec3<S> {
        let mut acc = Vec3::splat(S::zero());
        for (c, v) in node_values.iter().enumerate() {
            acc += *v * self.diff[(r, c)];
        }
        acc
    }

    /// `D * values`, axis by axis: the interpolant's derivative at every node.
    pub fn differentiate_nodes<S: Scalar>(&self, node_values: &[Vec3<S>]) -> Vec<Vec3<S>> {
        assert_eq!(node_values.len(), self.len(), "node count mismatch");
        (0..self.len()).map(|r| self.diff_row(r, node_values)).collect()
    }

    /// `D * values` for one scalar channel.
    pub fn differentiate_scalar<S: Scalar>(&self, values: &[S]) -> Vec<S> {
        assert_eq!(values.len(), self.len(), "node count mismatch");
        let m = self.len();
        (0..m)
            .map(|r| {
                let mut acc = S::zero();
                for (c, v) in values.iter().enumerate() {
                    acc += *v * self.diff[(r, c)];
                }
                acc
            })
            .collect()
    }
}

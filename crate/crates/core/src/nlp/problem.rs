use serde::{Deserialize, Serialize};

use nalgebra::DMatrix;

use crate::autodiff::{hessian, Scalar};
use crate::chebyshev::CollocationGrid;
use crate::geometry::{node_clearance, smooth_constraint, Segment, SmoothConstraintParams};
use crate::model::{Bounds, DynamicsParams, Vec3};

use super::solver::ConstrainedProblem;
use super::NlpError;

/// Upper bound placed on the maneuver time, seconds.
pub const DT_MAX: f64 = 1e4;

/// Where each block of the decision vector lives.
///
/// `[X_x, X_y, X_z, U_x, U_y, U_z, dt]`, each block `n + 1` long.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Layout {
    pub n: usize,
}

impl Layout {
    pub fn nodes(&self) -> usize {
        self.n + 1
    }

    pub fn dim(&self) -> usize {
        6 * self.nodes() + 1
    }

    pub fn state(&self, axis: usize, node: usize) -> usize {
        axis * self.nodes() + node
    }

    pub fn control(&self, axis: usize, node: usize) -> usize {
        (3 + axis) * self.nodes() + node
    }

    pub fn delta_t(&self) -> usize {
        6 * self.nodes()
    }

    pub fn pack(&self, states: &[Vec3], controls: &[Vec3], delta_t: f64) -> Vec<f64> {
        let mut x = vec![0.0; self.dim()];
        for i in 0..self.nodes() {
            for a in 0..3 {
                x[self.state(a, i)] = states[i][a];
                x[self.control(a, i)] = controls[i][a];
            }
        }
        x[self.delta_t()] = delta_t;
        x
    }

    pub fn unpack(&self, x: &[f64]) -> (Vec<Vec3>, Vec<Vec3>, f64) {
        let m = self.nodes();
        let states = (0..m)
            .map(|i| Vec3::new(x[self.state(0, i)], x[self.state(1, i)], x[self.state(2, i)]))
            .collect();
        let controls = (0..m)
            .map(|i| Vec3::new(x[self.control(0, i)], x[self.control(1, i)], x[self.control(2, i)]))
            .collect();
        (states, controls, x[self.delta_t()])
    }
}

/// Obstacle frozen at the position the planner was given.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ObstacleSnapshot {
    pub position: Vec3,
    pub radius: f64,
}

/// Boundary points and obstacle picture for one solve.
#[derive(Debug, Clone, PartialEq)]
pub struct PlanRequest {
    pub start: Vec3,
    pub goal: Vec3,
    pub obstacles: Vec<ObstacleSnapshot>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct RowCounts {
    pub equality: usize,
    pub segment: usize,
    pub node: usize,
    /// One-sided velocity rows (two per axis per node).
    pub velocity: usize,
}

impl RowCounts {
    pub fn inequality(&self) -> usize {
        self.segment + self.node + self.velocity
    }
}

/// Everything the transcription needs beyond the grid.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ProblemSetup {
    pub dynamics: DynamicsParams,
    pub bounds: Bounds,
    pub smooth: SmoothConstraintParams,
    pub dt_min: f64,
    /// Weight of the mean squared `U - X` added to the time cost. Small enough
    /// not to trade against time; it only picks among equally fast plans.
    pub effort_weight: f64,
}

/// The collocated minimum-time problem.
#[derive(Debug, Clone)]
pub struct NlpProblem {
    pub layout: Layout,
    pub rows: RowCounts,
    pub request: PlanRequest,
    diff: Vec<f64>,
    gains: [f64; 3],
    vel_lo: [f64; 3],
    vel_hi: [f64; 3],
    smooth: SmoothConstraintParams,
    effort_weight: f64,
    lower: Vec<f64>,
    upper: Vec<f64>,
}

pub fn assemble(setup: &ProblemSetup, grid: &CollocationGrid, request: &PlanRequest) -> Result<NlpProblem, NlpError> {
    for (k, o) in request.obstacles.iter().enumerate() {
        for (which, p) in [("start", request.start), ("goal", request.goal)] {
            let dist = p.distance(o.position);
            if dist < o.radius {
                return Err(NlpError::EndpointInside {
                    which,
                    obstacle: k,
                    distance: dist,
                    radius: o.radius,
                });
            }
        }
    }
    let layout = Layout { n: grid.order() };
    let m = layout.nodes();
    let n_obs = request.obstacles.len();
    let rows = RowCounts {
        equality: 3 * m,
        segment: n_obs * layout.n,
        node: n_obs * m,
        velocity: 6 * m,
    };

    let b = &setup.bounds;
    let mut lower = vec![0.0; layout.dim()];
    let mut upper = vec![0.0; layout.dim()];
    for i in 0..m {
        for a in 0..3 {
            let (lo, hi) = match i {
                0 => (request.start[a], request.start[a]),
                _ if i == layout.n => (request.goal[a], request.goal[a]),
                _ => (b.pos_lo[a], b.pos_hi[a]),
            };
            lower[layout.state(a, i)] = lo;
            upper[layout.state(a, i)] = hi;
            lower[layout.control(a, i)] = b.cmd_lo[a];
            upper[layout.control(a, i)] = b.cmd_hi[a];
        }
    }
    lower[layout.delta_t()] = setup.dt_min;
    upper[layout.delta_t()] = DT_MAX;

    let d = grid.diff_matrix();
    let diff = (0..m).flat_map(|r| (0..m).map(move |c| d[(r, c)])).collect();

    Ok(NlpProblem {
        layout,
        rows,
        request: request.clone(),
        diff,
        gains: setup.dynamics.gains().to_array(),
        vel_lo: b.vel_lo.to_array(),
        vel_hi: b.vel_hi.to_array(),
        smooth: setup.smooth,
        effort_weight: setup.effort_weight,
        lower,
        upper,
    })
}

impl NlpProblem {
    fn node<S: Scalar>(&self, x: &[S], i: usize) -> Vec3<S> {
        let l = &self.layout;
        Vec3::new(x[l.state(0, i)], x[l.state(1, i)], x[l.state(2, i)])
    }

    /// `D X_a` for every axis, in d/dtau units.
    fn node_derivatives<S: Scalar>(&self, x: &[S]) -> [Vec<S>; 3] {
        let m = self.layout.nodes();
        std::array::from_fn(|a| {
            let xa = &x[a * m..(a + 1) * m];
            (0..m)
                .map(|r| {
                    let row = &self.diff[r * m..(r + 1) * m];
                    let mut acc = S::zero();
                    for (dv, xv) in row.iter().zip(xa) {
                        if *dv != 0.0 {
                            acc = acc + *xv * *dv;
                        }
                    }
                    acc
                })
                .collect()
        })
    }
}

impl ConstrainedProblem for NlpProblem {
    fn dim(&self) -> usize {
        self.layout.dim()
    }

    fn n_eq(&self) -> usize {
        self.rows.equality
    }

    fn n_ineq(&self) -> usize {
        self.rows.inequality()
    }

    fn lower(&self) -> &[f64] {
        &self.lower
    }

    fn upper(&self) -> &[f64] {
        &self.upper
    }

    fn cost<S: Scalar>(&self, x: &[S]) -> S {
        let l = &self.layout;
        let dt = x[l.delta_t()];
        if self.effort_weight == 0.0 {
            return dt;
        }
        let mut effort = S::zero();
        for a in 0..3 {
            for i in 0..l.nodes() {
                let e = x[l.control(a, i)] - x[l.state(a, i)];
                effort = effort + e * e;
            }
        }
        dt + effort * (self.effort_weight / (3 * l.nodes()) as f64)
    }

    fn constraints<S: Scalar>(&self, x: &[S], out: &mut Vec<S>) {
        let l = &self.layout;
        let m = l.nodes();
        let dt = x[l.delta_t()];
        let dx = self.node_derivatives(x);

        // collocated dynamics: D X - dt * k (U - X)
        for (a, dxa) in dx.iter().enumerate() {
            for (i, &dxi) in dxa.iter().enumerate() {
                let rate = (x[l.control(a, i)] - x[l.state(a, i)]) * self.gains[a];
                out.push(dxi - dt * rate);
            }
        }

        let nodes: Vec<Vec3<S>> = (0..m).map(|i| self.node(x, i)).collect();
        for o in &self.request.obstacles {
            let c = Vec3::lift(o.position);
            for w in nodes.windows(2) {
                out.push(smooth_constraint(&Segment::new(w[0], w[1]), c, o.radius, &self.smooth));
            }
            for p in &nodes {
                out.push(node_clearance(*p, c, o.radius));
            }
        }

        // vel_lo <= D X / dt <= vel_hi, multiplied through by dt > 0
        for (a, dxa) in dx.iter().enumerate() {
            for &dxi in dxa {
                out.push(dxi - dt * self.vel_hi[a]);
                out.push(dt * self.vel_lo[a] - dxi);
            }
        }
    }

    fn lagrangian_hessian(&self, x: &[f64], w: &[f64]) -> Option<DMatrix<f64>> {
        let l = &self.layout;
        let m = l.nodes();
        let mut h = DMatrix::zeros(l.dim(), l.dim());
        let it = l.delta_t();

        if self.effort_weight != 0.0 {
            let c = 2.0 * self.effort_weight / (3 * m) as f64;
            for a in 0..3 {
                for i in 0..m {
                    let (s, u) = (l.state(a, i), l.control(a, i));
                    h[(s, s)] += c;
                    h[(u, u)] += c;
                    h[(s, u)] -= c;
                    h[(u, s)] -= c;
                }
            }
        }

        // dynamics rows are bilinear in dt and (U, X)
        for a in 0..3 {
            for i in 0..m {
                let wk = w[a * m + i] * self.gains[a];
                if wk == 0.0 {
                    continue;
                }
                let (s, u) = (l.state(a, i), l.control(a, i));
                h[(it, u)] -= wk;
                h[(u, it)] -= wk;
                h[(it, s)] += wk;
                h[(s, it)] += wk;
            }
        }

        let mut r = self.rows.equality;
        for o in &self.request.obstacles {
            for j in 0..l.n {
                let wr = w[r];
                r += 1;
                if wr == 0.0 {
                    continue;
                }
                let idx: [usize; 6] = std::array::from_fn(|v| l.state(v % 3, j + v / 3));
                let xs: [f64; 6] = std::array::from_fn(|v| x[idx[v]]);
                let (_, _, hb) = hessian(
                    |v| {
                        let seg = Segment::new(Vec3::new(v[0], v[1], v[2]), Vec3::new(v[3], v[4], v[5]));
                        smooth_constraint(&seg, Vec3::lift(o.position), o.radius, &self.smooth)
                    },
                    &xs,
                )
                .ok()?;
                for p in 0..6 {
                    for q in 0..6 {
                        h[(idx[p], idx[q])] += wr * hb[p][q];
                    }
                }
            }
            for i in 0..m {
                let wr = w[r];
                r += 1;
                if wr == 0.0 {
                    continue;
                }
                let idx: [usize; 3] = std::array::from_fn(|a| l.state(a, i));
                let xs: [f64; 3] = std::array::from_fn(|a| x[idx[a]]);
                let (_, _, hb) = hessian(
                    |v| node_clearance(Vec3::new(v[0], v[1], v[2]), Vec3::lift(o.position), o.radius),
                    &xs,
                )
                .ok()?;
                for p in 0..3 {
                    for q in 0..3 {
                        h[(idx[p], idx[q])] += wr * hb[p][q];
                    }
                }
            }
        }
        Some(h)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::{evaluate, jacobian, VectorFn};
    use crate::chebyshev::make_grid;
    use proptest::prelude::*;

    fn setup() -> ProblemSetup {
        ProblemSetup {
            dynamics: DynamicsParams::default(),
            bounds: Bounds::default(),
            smooth: SmoothConstraintParams::default(),
            dt_min: 0.1,
            effort_weight: 1e-2,
        }
    }

    fn request(obstacles: Vec<ObstacleSnapshot>) -> PlanRequest {
        PlanRequest {
            start: Vec3::new(-1.5, -1.5, 0.75),
            goal: Vec3::new(1.5, 1.5, 0.75),
            obstacles,
        }
    }

    fn one_obstacle() -> Vec<ObstacleSnapshot> {
        vec![ObstacleSnapshot {
            position: Vec3::new(0.0, 0.3, 0.75),
            radius: 0.6,
        }]
    }

    #[test]
    fn row_counts_for_order_eight() {
        let grid = make_grid(8).unwrap();
        let p = assemble(&setup(), &grid, &request(one_obstacle())).unwrap();
        assert_eq!(p.dim(), 55);
        assert_eq!(p.n_eq(), 27);
        assert_eq!((p.rows.segment, p.rows.node), (8, 9));
        // 9 nodes x 3 axes, each two-sided
        assert_eq!(p.rows.velocity, 54);
        let x = vec![0.5; 55];
        let mut out = Vec::new();
        p.constraints(&x, &mut out);
        assert_eq!(out.len(), p.n_eq() + p.n_ineq());
    }

    #[test]
    fn no_obstacles_gives_no_obstacle_rows() {
        let grid = make_grid(6).unwrap();
        let p = assemble(&setup(), &grid, &request(vec![])).unwrap();
        assert_eq!(p.rows.segment + p.rows.node, 0);
        assert_eq!(p.n_ineq(), p.rows.velocity);
    }

    #[test]
    fn endpoints_are_pinned() {
        let grid = make_grid(5).unwrap();
        let r = request(vec![]);
        let p = assemble(&setup(), &grid, &r).unwrap();
        let l = p.layout;
        for a in 0..3 {
            assert_eq!(p.lower()[l.state(a, 0)], r.start[a]);
            assert_eq!(p.upper()[l.state(a, 0)], r.start[a]);
            assert_eq!(p.lower()[l.state(a, 5)], r.goal[a]);
            assert_eq!(p.upper()[l.state(a, 5)], r.goal[a]);
        }
        assert_eq!(p.lower()[l.delta_t()], 0.1);
    }

    #[test]
    fn goal_inside_sphere_is_rejected() {
        let grid = make_grid(4).unwrap();
        let mut r = request(vec![]);
        r.obstacles.push(ObstacleSnapshot {
            position: r.goal + Vec3::new(0.1, 0.0, 0.0),
            radius: 0.6,
        });
        match assemble(&setup(), &grid, &r) {
            Err(NlpError::EndpointInside { which, .. }) => assert_eq!(which, "goal"),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn constant_state_has_zero_velocity_rows() {
        let grid = make_grid(8).unwrap();
        let p = assemble(&setup(), &grid, &request(vec![])).unwrap();
        let l = p.layout;
        let c = Vec3::new(0.3, -0.2, 1.0);
        for dt in [0.1, 1.0, 7.5] {
            let x = l.pack(&vec![c; 9], &vec![c; 9], dt);
            let mut out = Vec::new();
            p.constraints(&x, &mut out);
            for &v in &out[..p.n_eq()] {
                assert!(v.abs() < 1e-12);
            }
            let vel = &out[p.n_eq()..];
            for pair in vel.chunks(2) {
                // dX = 0 so the rows reduce to -dt*hi and dt*lo
                assert!((pair[0] + dt * 0.5).abs() < 1e-12);
                assert!((pair[1] + dt * 0.5).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn pack_unpack_roundtrip() {
        let l = Layout { n: 3 };
        let s: Vec<Vec3> = (0..4).map(|i| Vec3::new(i as f64, 1.0, 2.0)).collect();
        let u: Vec<Vec3> = (0..4).map(|i| Vec3::new(0.0, i as f64, -1.0)).collect();
        let x = l.pack(&s, &u, 2.5);
        assert_eq!(l.unpack(&x), (s, u, 2.5));
    }

    struct Rows<'a>(&'a NlpProblem);
    impl VectorFn for Rows<'_> {
        fn eval<S: Scalar>(&self, x: &[S], out: &mut Vec<S>) {
            self.0.constraints(x, out);
        }
    }

    #[test]
    fn two_node_residual_matches_finite_differences() {
        let grid = make_grid(1).unwrap();
        let mut r = request(one_obstacle());
        r.start = Vec3::new(-1.0, 0.0, 0.75);
        r.goal = Vec3::new(1.0, 0.1, 0.75);
        let p = assemble(&setup(), &grid, &r).unwrap();
        let x: Vec<f64> = (0..p.dim()).map(|i| 0.3 + 0.17 * i as f64 % 1.3 - 0.4).collect();
        let mut x = x;
        x[p.layout.delta_t()] = 2.0;
        let jac = jacobian::<4, _>(&Rows(&p), &x).unwrap();
        let h = 1e-6;
        let (mut fp, mut fm) = (Vec::new(), Vec::new());
        for j in 0..p.dim() {
            let mut xp = x.clone();
            let mut xm = x.clone();
            xp[j] += h;
            xm[j] -= h;
            evaluate(&Rows(&p), &xp, &mut fp).unwrap();
            evaluate(&Rows(&p), &xm, &mut fm).unwrap();
            for r in 0..fp.len() {
                let fd = (fp[r] - fm[r]) / (2.0 * h);
                let ad = jac.matrix[(r, j)];
                assert!(
                    (fd - ad).abs() <= 1e-6 * ad.abs().max(fd.abs()) + 1e-8,
                    "row {r} col {j}: {ad} vs {fd}"
                );
            }
        }
    }

    #[test]
    fn lagrangian_hessian_matches_differenced_gradient() {
        let grid = make_grid(4).unwrap();
        let mut r = request(one_obstacle());
        r.start = Vec3::new(-1.0, 0.0, 0.75);
        r.goal = Vec3::new(1.0, 0.4, 0.9);
        let p = assemble(&setup(), &grid, &r).unwrap();
        let l = p.layout;
        let states: Vec<Vec3> = (0..5)
            .map(|i| {
                let t = i as f64 / 4.0;
                Vec3::new(-1.0 + 2.0 * t, 0.4 * t + 0.5 * (t * 3.0).sin(), 0.75 + 0.15 * t * t)
            })
            .collect();
        let controls: Vec<Vec3> = states.iter().map(|s| *s * 1.1 + Vec3::splat(0.05)).collect();
        let x = l.pack(&states, &controls, 3.0);
        let rows = p.n_eq() + p.n_ineq();
        let w: Vec<f64> = (0..rows).map(|k| 0.5 + (k as f64 * 0.37).sin()).collect();
        // gradient of f + w^T c from AD, differenced by columns
        let grad = |x: &[f64]| -> Vec<f64> {
            let jac = jacobian::<8, _>(&Rows(&p), x).unwrap();
            let (_, g) = crate::autodiff::gradient::<8, _>(|v: &[crate::autodiff::Dual<8>]| p.cost(v), x).unwrap();
            (0..x.len())
                .map(|j| g[j] + (0..rows).map(|k| w[k] * jac.matrix[(k, j)]).sum::<f64>())
                .collect()
        };
        let hm = p.lagrangian_hessian(&x, &w).unwrap();
        let e = 1e-6;
        for j in 0..p.dim() {
            let mut xp = x.clone();
            let mut xm = x.clone();
            xp[j] += e;
            xm[j] -= e;
            let (gp, gm) = (grad(&xp), grad(&xm));
            for i in 0..p.dim() {
                let fd = (gp[i] - gm[i]) / (2.0 * e);
                assert!(
                    (fd - hm[(i, j)]).abs() < 1e-5 * fd.abs().max(1.0),
                    "({i},{j}): {} vs {fd}",
                    hm[(i, j)]
                );
            }
        }
    }

    proptest! {
        #[test]
        fn layout_round_trips(n in 1usize..20, seed in proptest::collection::vec(-3.0..3.0f64, 6 * 21), dt in 0.1..50.0f64) {
            let l = Layout { n };
            let m = n + 1;
            let s: Vec<Vec3> = (0..m).map(|i| Vec3::new(seed[i], seed[m + i], seed[2 * m + i])).collect();
            let u: Vec<Vec3> = (0..m).map(|i| Vec3::new(seed[3 * m + i], seed[4 * m + i], seed[5 * m + i])).collect();
            let x = l.pack(&s, &u, dt);
            prop_assert_eq!(x.len(), 6 * m + 1);
            prop_assert_eq!(l.unpack(&x), (s, u, dt));
        }

        #[test]
        fn row_counts_follow_order_and_obstacles(n in 4usize..16, k in 0usize..4) {
            let obstacles = (0..k)
                .map(|j| ObstacleSnapshot { position: Vec3::new(-0.5 + 0.4 * j as f64, 0.3, 0.75), radius: 0.1 })
                .collect();
            let p = assemble(&setup(), &make_grid(n).unwrap(), &request(obstacles)).unwrap();
            let mut out = Vec::new();
            let x = vec![0.5; p.dim()];
            p.constraints(&x, &mut out);
            prop_assert_eq!(p.dim(), 6 * (n + 1) + 1);
            prop_assert_eq!(out.len(), 3 * (n + 1) + k * (2 * n + 1) + 6 * (n + 1));
            prop_assert_eq!(p.n_eq() + p.n_ineq(), out.len());
        }
    }
}

//! Minimum-time trajectory NLP: transcription, initial guesses and solving.

pub mod problem;
pub mod solver;

use std::time::Instant;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::chebyshev::{CollocationGrid, GridError};
use crate::geometry::{repair_guess, GeometryError, Sphere};
use crate::model::Vec3;

pub use problem::{assemble, Layout, NlpProblem, ObstacleSnapshot, PlanRequest, ProblemSetup, RowCounts};
pub use solver::{minimize, ConstrainedProblem, KktResiduals, Multipliers, SolveStatus, SolverParams, WarmStart};

#[derive(Debug, Clone, PartialEq, Error)]
pub enum NlpError {
    #[error(
        "{which} is inside the safety sphere of obstacle {obstacle} (distance {distance:.4} m < radius {radius} m)"
    )]
    EndpointInside {
        which: &'static str,
        obstacle: usize,
        distance: f64,
        radius: f64,
    },
    #[error("guess repair failed: {0}")]
    Repair(#[from] GeometryError),
    #[error(transparent)]
    Grid(#[from] GridError),
    #[error("guess has {got} nodes, grid needs {want}")]
    GuessShape { got: usize, want: usize },
}

/// A primal point, optionally with duals, to start a solve from.
#[derive(Debug, Clone, PartialEq)]
pub struct Guess {
    pub node_states: Vec<Vec3>,
    pub node_controls: Vec<Vec3>,
    pub delta_t: f64,
    pub multipliers: Option<Multipliers>,
}

/// Result of one solve.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlanSolution {
    pub node_states: Vec<Vec3>,
    pub node_controls: Vec<Vec3>,
    /// Maneuver time, seconds.
    pub delta_t: f64,
    pub multipliers: Multipliers,
    pub status: SolveStatus,
    /// Inner (quasi-Newton) iterations.
    pub iterations: usize,
    pub outer_iterations: usize,
    /// Wall-clock seconds spent in the solver.
    pub solve_time: f64,
    /// Simulation time that tau = 0 refers to.
    pub epoch: f64,
    pub kkt: KktResiduals,
}

impl PlanSolution {
    pub fn converged(&self) -> bool {
        self.status == SolveStatus::Converged
    }

    fn tau_at(&self, t: f64) -> f64 {
        if self.delta_t > 0.0 {
            ((t - self.epoch) / self.delta_t).clamp(0.0, 1.0)
        } else {
            1.0
        }
    }

    /// Planned position at simulation time `t`, held at the ends.
    pub fn state_at(&self, grid: &CollocationGrid, t: f64) -> Vec3 {
        grid.interpolate(&self.node_states, self.tau_at(t))
            .expect("tau is clamped")
    }

    pub fn control_at(&self, grid: &CollocationGrid, t: f64) -> Vec3 {
        grid.interpolate(&self.node_controls, self.tau_at(t))
            .expect("tau is clamped")
    }

    /// `samples` points of the state interpolant, evenly spaced in tau.
    pub fn dense_states(&self, grid: &CollocationGrid, samples: usize) -> Vec<(f64, Vec3)> {
        let samples = samples.max(2);
        (0..samples)
            .map(|k| {
                let tau = k as f64 / (samples - 1) as f64;
                let p = grid.interpolate(&self.node_states, tau).expect("tau in range");
                (tau * self.delta_t, p)
            })
            .collect()
    }

    pub fn as_guess(&self) -> Guess {
        Guess {
            node_states: self.node_states.clone(),
            node_controls: self.node_controls.clone(),
            delta_t: self.delta_t,
            multipliers: Some(self.multipliers.clone()),
        }
    }
}

/// Largest per-axis travel time along the polyline at the velocity bounds.
fn polyline_time(points: &[Vec3], setup: &ProblemSetup) -> f64 {
    let b = &setup.bounds;
    points
        .windows(2)
        .map(|w| {
            let d = w[1] - w[0];
            (0..3)
                .map(|a| {
                    let v = if d[a] >= 0.0 { b.vel_hi[a] } else { -b.vel_lo[a] };
                    if v > 0.0 {
                        d[a].abs() / v
                    } else {
                        0.0
                    }
                })
                .fold(0.0, f64::max)
        })
        .sum()
}

/// Starting point for a solve.
///
/// With a previous plan of the same order its nodes and duals are reused,
/// with node 0 moved to the current start and node n to the goal. Otherwise
/// the straight line start-to-goal is sampled at the nodes, pushed clear of
/// the spheres, and timed at the velocity bounds.
pub fn make_initial_guess(
    setup: &ProblemSetup,
    grid: &CollocationGrid,
    request: &PlanRequest,
    previous: Option<&PlanSolution>,
) -> Result<Guess, NlpError> {
    let m = grid.len();
    if let Some(prev) = previous.filter(|p| p.node_states.len() == m) {
        let mut g = prev.as_guess();
        g.node_states[0] = request.start;
        g.node_states[m - 1] = request.goal;
        g.delta_t = g.delta_t.max(setup.dt_min);
        return Ok(g);
    }
    let line: Vec<Vec3> = grid
        .nodes()
        .iter()
        .map(|&tau| request.start + (request.goal - request.start) * tau)
        .collect();
    let spheres: Vec<Sphere> = request
        .obstacles
        .iter()
        .map(|o| Sphere {
            center: o.position,
            radius: o.radius,
        })
        .collect();
    let states = repair_guess(&line, &spheres, setup.smooth.repair_margin)?;
    let delta_t = polyline_time(&states, setup).max(setup.dt_min);
    Ok(Guess {
        node_controls: states
            .iter()
            .map(|p| p.clamp(setup.bounds.cmd_lo, setup.bounds.cmd_hi))
            .collect(),
        node_states: states,
        delta_t,
        multipliers: None,
    })
}

/// Solves `p` from `guess`. With `warm` the guess duals seed the multipliers.
pub fn solve(p: &NlpProblem, guess: &Guess, warm: bool, params: &SolverParams) -> Result<PlanSolution, NlpError> {
    let m = p.layout.nodes();
    if guess.node_states.len() != m || guess.node_controls.len() != m {
        return Err(NlpError::GuessShape {
            got: guess.node_states.len(),
            want: m,
        });
    }
    let x0 = p.layout.pack(
        &guess.node_states,
        &guess.node_controls,
        guess.delta_t.max(params.dt_min),
    );
    let warm_start = match (&guess.multipliers, warm) {
        (Some(mult), true) => Some(WarmStart { multipliers: mult }),
        _ => None,
    };
    let clock = Instant::now();
    let out = minimize(p, &x0, warm_start, params);
    let solve_time = clock.elapsed().as_secs_f64();
    let (node_states, node_controls, delta_t) = p.layout.unpack(&out.x);
    Ok(PlanSolution {
        node_states,
        node_controls,
        delta_t,
        multipliers: out.multipliers,
        status: out.status,
        iterations: out.inner_iterations,
        outer_iterations: out.outer_iterations,
        solve_time,
        epoch: 0.0,
        kkt: out.kkt,
    })
}

/// Cold guess, assemble and solve in one call.
pub fn plan_once(
    setup: &ProblemSetup,
    grid: &CollocationGrid,
    request: &PlanRequest,
    params: &SolverParams,
) -> Result<PlanSolution, NlpError> {
    let p = assemble(setup, grid, request)?;
    let guess = make_initial_guess(setup, grid, request, None)?;
    solve(&p, &guess, false, params)
}

/// Plans through `waypoints` as consecutive two-point phases.
///
/// Each phase starts where the previous one ended; the total maneuver time is
/// the sum of the phase times.
pub fn plan_route(
    setup: &ProblemSetup,
    grid: &CollocationGrid,
    start: Vec3,
    waypoints: &[Vec3],
    goal: Vec3,
    obstacles: &[ObstacleSnapshot],
    params: &SolverParams,
) -> Result<Vec<PlanSolution>, NlpError> {
    let mut phases = Vec::with_capacity(waypoints.len() + 1);
    let mut from = start;
    let mut epoch = 0.0;
    for &to in waypoints.iter().chain(std::iter::once(&goal)) {
        let request = PlanRequest {
            start: from,
            goal: to,
            obstacles: obstacles.to_vec(),
        };
        let mut sol = plan_once(setup, grid, &request, params)?;
        sol.epoch = epoch;
        epoch += sol.delta_t;
        from = *sol.node_states.last().expect("grid has nodes");
        phases.push(sol);
    }
    Ok(phases)
}

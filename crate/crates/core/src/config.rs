//! Scenario files: a TOML document with SI units throughout.
//!
//! Every section except `start`, `goal` and `obstacles` may be omitted and
//! falls back to defaults. Unknown keys are rejected.

use std::fmt;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::apf::ApfParams;
use crate::geometry::SmoothConstraintParams;
use crate::model::{Bounds, DynamicsParams, Obstacle, ObstacleTrajectory, Vec3};
use crate::nlp::{ProblemSetup, SolverParams};

/// How the planner treats obstacle motion during one solve.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ObstaclePrediction {
    /// Position at request time.
    #[default]
    Frozen,
    /// Position extrapolated at constant velocity by `prediction_horizon`.
    ConstantVelocity,
}

/// Which control the controller reads from the latest plan.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CommandMode {
    /// The node-0 control, held until the next plan.
    #[default]
    NodeZero,
    /// The control interpolant evaluated at the current time.
    Interpolate,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PlannerOptions {
    pub obstacle_prediction: ObstaclePrediction,
    /// Seconds, used by constant-velocity prediction.
    pub prediction_horizon: f64,
    pub command_mode: CommandMode,
    pub warm_start: bool,
    /// Tie-break weight on control effort in the planner cost, s/m^2.
    pub effort_weight: f64,
}

impl Default for PlannerOptions {
    fn default() -> Self {
        Self {
            obstacle_prediction: ObstaclePrediction::Frozen,
            prediction_horizon: 0.1,
            command_mode: CommandMode::NodeZero,
            warm_start: true,
            effort_weight: 1e-2,
        }
    }
}

fn default_name() -> String {
    "scenario".into()
}
fn default_grid_order() -> usize {
    12
}
fn default_controller_rate() -> f64 {
    60.0
}
fn default_planner_rate() -> f64 {
    10.0
}
fn default_goal_threshold() -> f64 {
    0.1
}
fn default_sim_duration() -> f64 {
    150.0
}
fn default_switching() -> bool {
    true
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScenarioConfig {
    #[serde(default = "default_name")]
    pub name: String,
    /// Initial boundary point, m.
    pub start: Vec3,
    /// Final boundary point, m.
    pub goal: Vec3,
    /// Interior points visited in order, m.
    #[serde(default)]
    pub waypoints: Vec<Vec3>,
    /// Collocation polynomial order.
    #[serde(default = "default_grid_order")]
    pub grid_order: usize,
    #[serde(default = "default_controller_rate")]
    pub controller_rate_hz: f64,
    #[serde(default = "default_planner_rate")]
    pub planner_rate_hz: f64,
    /// Distance at which the goal counts as reached, m.
    #[serde(default = "default_goal_threshold")]
    pub goal_threshold: f64,
    /// Simulated seconds.
    #[serde(default = "default_sim_duration")]
    pub sim_duration: f64,
    /// Swap start and goal on arrival instead of stopping.
    #[serde(default = "default_switching")]
    pub boundary_switching: bool,
    #[serde(default)]
    pub dynamics: DynamicsParams,
    #[serde(default)]
    pub bounds: Bounds,
    #[serde(default)]
    pub apf: ApfParams,
    #[serde(default)]
    pub constraint: SmoothConstraintParams,
    #[serde(default)]
    pub solver: SolverParams,
    #[serde(default)]
    pub planner: PlannerOptions,
    #[serde(default)]
    pub obstacles: Vec<Obstacle>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct FieldError {
    pub field: String,
    pub message: String,
}

impl fmt::Display for FieldError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}: {}", self.field, self.message)
    }
}

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("cannot read {path}: {source}")]
    Io { path: String, source: std::io::Error },
    #[error("parse error: {0}")]
    Parse(String),
    #[error("{} invalid field(s):\n{}", .0.len(), .0.iter().map(|e| format!("  {e}")).collect::<Vec<_>>().join("\n"))]
    Invalid(Vec<FieldError>),
}

struct Checker(Vec<FieldError>);

impl Checker {
    fn check(&mut self, ok: bool, field: impl Into<String>, message: impl Into<String>) {
        if !ok {
            self.0.push(FieldError {
                field: field.into(),
                message: message.into(),
            });
        }
    }

    fn finite(&mut self, v: Vec3, field: &str) {
        self.check(v.is_finite(), field, "components must be finite");
    }

    fn positive(&mut self, v: f64, field: &str) {
        self.check(v > 0.0 && v.is_finite(), field, format!("must be > 0, got {v}"));
    }

    fn ordered(&mut self, lo: Vec3, hi: Vec3, field: &str) {
        for a in 0..3 {
            self.check(
                lo[a] <= hi[a],
                format!("bounds.{field}"),
                format!("lower bound {} exceeds upper bound {} on axis {a}", lo[a], hi[a]),
            );
        }
    }
}

impl ScenarioConfig {
    pub fn from_toml_str(text: &str) -> Result<Self, ConfigError> {
        let cfg: Self = toml::from_str(text).map_err(|e| ConfigError::Parse(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Io {
            path: path.display().to_string(),
            source,
        })?;
        Self::from_toml_str(&text)
    }

    /// The effective configuration with every default filled in.
    pub fn to_toml_string(&self) -> String {
        toml::to_string_pretty(self).expect("scenario is always representable")
    }

    pub fn problem_setup(&self) -> ProblemSetup {
        ProblemSetup {
            dynamics: self.dynamics,
            bounds: self.bounds,
            smooth: self.constraint,
            dt_min: self.solver.dt_min,
            effort_weight: self.planner.effort_weight,
        }
    }

    /// Controller ticks per planner period, at least one.
    pub fn default_solve_ticks(&self) -> usize {
        ((self.controller_rate_hz / self.planner_rate_hz).round() as usize).max(1)
    }

    /// Checks every invariant and reports all violations together.
    pub fn validate(&self) -> Result<(), ConfigError> {
        let mut c = Checker(Vec::new());
        c.finite(self.start, "start");
        c.finite(self.goal, "goal");
        let b = &self.bounds;
        for (lo, hi, name) in [
            (b.pos_lo, b.pos_hi, "pos"),
            (b.cmd_lo, b.cmd_hi, "cmd"),
            (b.vel_lo, b.vel_hi, "vel"),
        ] {
            c.finite(lo, &format!("bounds.{name}_lo"));
            c.finite(hi, &format!("bounds.{name}_hi"));
            c.ordered(lo, hi, name);
        }
        for a in 0..3 {
            c.check(
                b.vel_lo[a] < 0.0 && b.vel_hi[a] > 0.0,
                "bounds.vel_lo/vel_hi",
                format!("axis {a} must allow motion both ways (lo < 0 < hi)"),
            );
        }
        c.check(b.contains_position(self.start), "start", "outside the position bounds");
        c.check(b.contains_position(self.goal), "goal", "outside the position bounds");
        for (i, w) in self.waypoints.iter().enumerate() {
            c.finite(*w, &format!("waypoints[{i}]"));
            c.check(
                b.contains_position(*w),
                format!("waypoints[{i}]"),
                "outside the position bounds",
            );
        }

        c.positive(self.dynamics.kx, "dynamics.kx");
        c.positive(self.dynamics.ky, "dynamics.ky");
        c.positive(self.dynamics.kz, "dynamics.kz");

        c.check(
            self.grid_order >= 4,
            "grid_order",
            format!("must be >= 4, got {}", self.grid_order),
        );
        c.positive(self.controller_rate_hz, "controller_rate_hz");
        c.positive(self.planner_rate_hz, "planner_rate_hz");
        c.positive(self.goal_threshold, "goal_threshold");
        c.positive(self.sim_duration, "sim_duration");

        c.positive(self.apf.alpha, "apf.alpha");
        c.check(
            self.apf.eta >= 0.0,
            "apf.eta",
            format!("must be >= 0, got {}", self.apf.eta),
        );
        c.positive(self.constraint.delta, "constraint.delta");
        c.positive(self.constraint.epsilon_seg, "constraint.epsilon_seg");
        c.check(
            self.constraint.repair_margin >= 0.0,
            "constraint.repair_margin",
            "must be >= 0",
        );

        let s = &self.solver;
        for (v, name) in [
            (s.tol_eq, "solver.tol_eq"),
            (s.tol_ineq, "solver.tol_ineq"),
            (s.tol_bound, "solver.tol_bound"),
            (s.tol_stationarity, "solver.tol_stationarity"),
            (s.initial_penalty, "solver.initial_penalty"),
            (s.dt_min, "solver.dt_min"),
        ] {
            c.positive(v, name);
        }
        c.check(s.penalty_growth > 1.0, "solver.penalty_growth", "must be > 1");
        c.check(s.max_outer_iters >= 1, "solver.max_outer_iters", "must be >= 1");
        c.check(s.max_inner_iters >= 1, "solver.max_inner_iters", "must be >= 1");
        c.check(
            (0.0..0.1).contains(&self.planner.effort_weight),
            "planner.effort_weight",
            "must be in [0, 0.1)",
        );
        c.check(
            self.planner.prediction_horizon >= 0.0,
            "planner.prediction_horizon",
            "must be >= 0",
        );

        for (k, o) in self.obstacles.iter().enumerate() {
            let field = format!("obstacles[{k}]");
            c.positive(o.safety_radius, &format!("{field}.safety_radius"));
            match &o.trajectory {
                ObstacleTrajectory::Fixed { position } => c.finite(*position, &format!("{field}.trajectory.position")),
                ObstacleTrajectory::Circular {
                    center,
                    radius,
                    angular_speed,
                    height,
                    phase,
                } => {
                    c.finite(*center, &format!("{field}.trajectory.center"));
                    c.check(
                        *radius >= 0.0 && radius.is_finite(),
                        format!("{field}.trajectory.radius"),
                        "must be >= 0",
                    );
                    c.check(
                        angular_speed.is_finite() && height.is_finite() && phase.is_finite(),
                        format!("{field}.trajectory"),
                        "angular_speed, height and phase must be finite",
                    );
                }
                ObstacleTrajectory::Sampled { times, positions } => {
                    c.check(
                        !times.is_empty() && times.len() == positions.len(),
                        format!("{field}.trajectory"),
                        "times and positions must be non-empty and the same length",
                    );
                    c.check(
                        times.windows(2).all(|w| w[1] > w[0]),
                        format!("{field}.trajectory.times"),
                        "must be strictly increasing",
                    );
                    c.check(
                        times.first().is_some_and(|t| *t <= 0.0),
                        format!("{field}.trajectory.times"),
                        "must start at or before t = 0",
                    );
                    c.check(
                        times.last().is_some_and(|t| *t >= self.sim_duration),
                        format!("{field}.trajectory.times"),
                        "must cover the simulated duration",
                    );
                }
            }
            if o.safety_radius > 0.0 {
                if let Ok(p) = o.position(0.0) {
                    for (name, q) in [("start", self.start), ("goal", self.goal)] {
                        let d = q.distance(p);
                        c.check(
                            d >= o.safety_radius,
                            name,
                            format!(
                                "inside the safety sphere of obstacles[{k}] at t = 0 (distance {d:.3} m < radius {} m)",
                                o.safety_radius
                            ),
                        );
                    }
                }
            }
        }

        if c.0.is_empty() {
            Ok(())
        } else {
            Err(ConfigError::Invalid(c.0))
        }
    }
}

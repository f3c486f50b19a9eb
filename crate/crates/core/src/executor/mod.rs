//! The closed loop: a background planner and a fixed-rate controller.
//!
//! Each controller tick reads the latest published plan, takes its node-0
//! control, adds the APF correction, clips to the command box and advances
//! the simulated vehicle exactly. Whenever the planner is idle a new solve is
//! launched from a snapshot of the current state, warm-started from the plan
//! in use.
//!
//! Two schedules are provided. [`Mode::Lockstep`] computes each solve
//! synchronously but publishes it a fixed number of ticks later, so runs are
//! reproducible bit for bit. [`Mode::Realtime`] runs the planner on its own
//! thread and paces the controller against the wall clock.

pub mod log;

use std::sync::mpsc;
use std::sync::Arc;
use std::thread;
use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::apf::{blend_command, ApfMemory, ApfObstacle};
use crate::chebyshev::{make_grid, CollocationGrid};
use crate::config::{CommandMode, ObstaclePrediction, PlannerOptions, ScenarioConfig};
use crate::geometry::fallback_direction;
use crate::model::{dynamics_step_exact, ModelError, ObstacleTrajectory, Vec3};
use crate::nlp::{
    assemble, make_initial_guess, solve, NlpError, ObstacleSnapshot, PlanRequest, PlanSolution, ProblemSetup,
    SolveStatus, SolverParams,
};

pub use log::{Event, EventKind, SimLog, SolveRecord, TickRecord};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    /// Each solve is published exactly `solve_ticks` controller ticks after launch.
    Lockstep {
        solve_ticks: usize,
    },
    Realtime,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RunOptions {
    pub mode: Mode,
    /// No solves are launched at or after this simulation time.
    pub planner_cutoff: Option<f64>,
    /// Randomizes circular obstacle phases.
    pub seed: Option<u64>,
    /// Overrides the scenario's simulated duration.
    pub duration: Option<f64>,
}

impl RunOptions {
    pub fn lockstep(solve_ticks: usize) -> Self {
        Self {
            mode: Mode::Lockstep { solve_ticks },
            planner_cutoff: None,
            seed: None,
            duration: None,
        }
    }
}

#[derive(Debug, Error)]
pub enum ExecError {
    #[error("scenario infeasible at start: {0}")]
    Infeasible(#[from] NlpError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error("solve_ticks must be >= 1")]
    SolveTicks,
}

/// Applies the run seed: each circular obstacle gets a uniformly random phase.
pub fn seeded_scenario(scn: &ScenarioConfig, seed: Option<u64>) -> ScenarioConfig {
    let mut out = scn.clone();
    if let Some(seed) = seed {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for o in &mut out.obstacles {
            if let ObstacleTrajectory::Circular { phase, .. } = &mut o.trajectory {
                *phase = rng.random_range(0.0..std::f64::consts::TAU);
            }
        }
    }
    out
}

struct PlannerCtx {
    grid: Arc<CollocationGrid>,
    setup: ProblemSetup,
    params: SolverParams,
    options: PlannerOptions,
}

struct Job {
    generation: u64,
    request_t: f64,
    request: PlanRequest,
    previous: Option<PlanSolution>,
    post_switch: bool,
}

struct Outcome {
    generation: u64,
    record: SolveRecord,
}

fn run_job(ctx: &PlannerCtx, job: Job) -> Outcome {
    let mut record = SolveRecord {
        request_t: job.request_t,
        completion_t: None,
        iterations: 0,
        outer_iterations: 0,
        status: SolveStatus::InfeasibleDetected,
        delta_t: f64::NAN,
        kkt: Default::default(),
        solve_time: 0.0,
        warm: false,
        post_switch: job.post_switch,
        warm_attempt: None,
        start: job.request.start,
        goal: job.request.goal,
        obstacles: job.request.obstacles.clone(),
        plan: None,
    };
    let clock = Instant::now();
    let attempt = |previous: Option<&PlanSolution>| -> Result<PlanSolution, NlpError> {
        let p = assemble(&ctx.setup, &ctx.grid, &job.request)?;
        let guess = make_initial_guess(&ctx.setup, &ctx.grid, &job.request, previous)?;
        solve(&p, &guess, previous.is_some(), &ctx.params)
    };
    let previous = job.previous.as_ref().filter(|_| ctx.options.warm_start);
    let mut result = attempt(previous);
    record.warm = previous.is_some();
    if previous.is_some() && !matches!(&result, Ok(s) if s.converged()) {
        record.warm_attempt = Some(
            result
                .as_ref()
                .map(|s| s.status)
                .unwrap_or(SolveStatus::InfeasibleDetected),
        );
        result = attempt(None);
    }
    record.solve_time = clock.elapsed().as_secs_f64();
    if let Ok(mut sol) = result {
        sol.epoch = job.request_t;
        sol.solve_time = record.solve_time;
        record.iterations = sol.iterations;
        record.outer_iterations = sol.outer_iterations;
        record.status = sol.status;
        record.delta_t = sol.delta_t;
        record.kkt = sol.kkt;
        record.plan = Some(sol);
    }
    Outcome {
        generation: job.generation,
        record,
    }
}

fn snapshot(scn: &ScenarioConfig, t: f64) -> Result<Vec<ObstacleSnapshot>, ModelError> {
    scn.obstacles
        .iter()
        .map(|o| {
            let mut position = o.position(t)?;
            if scn.planner.obstacle_prediction == ObstaclePrediction::ConstantVelocity {
                position += o.velocity(t)? * scn.planner.prediction_horizon;
            }
            Ok(ObstacleSnapshot {
                position,
                radius: o.safety_radius,
            })
        })
        .collect()
}

/// Separation, as a multiple of the radius, at which a snapshot is placed when
/// the vehicle is already inside its safety sphere at request time.
pub const ESCAPE_CLEARANCE: f64 = 1.001;

/// Below this separation no escape plan is attempted.
pub const MIN_ESCAPE_SEPARATION: f64 = 1e-3;

/// Controller-side state shared by both schedules.
struct Loop<'a> {
    scn: &'a ScenarioConfig,
    grid: Arc<CollocationGrid>,
    uav: Vec3,
    plan: PlanSolution,
    route: Vec<Vec3>,
    target: usize,
    generation: u64,
    post_switch_pending: bool,
    inside_sphere: bool,
    planner_disabled_logged: bool,
    apf_memory: ApfMemory,
    log: SimLog,
    finished: bool,
}

impl<'a> Loop<'a> {
    fn goal(&self) -> Vec3 {
        self.route[self.target]
    }

    fn new_job(&mut self, t: f64, cutoff: Option<f64>) -> Result<Option<Job>, ModelError> {
        if cutoff.is_some_and(|c| t >= c) {
            if !self.planner_disabled_logged {
                self.planner_disabled_logged = true;
                self.log.events.push(Event {
                    t,
                    kind: EventKind::PlannerDisabled,
                    detail: "planner cut-off reached".into(),
                });
            }
            return Ok(None);
        }
        let mut obstacles = snapshot(self.scn, t)?;
        let goal_blocked = obstacles.iter().any(|o| self.goal().distance(o.position) < o.radius);
        let centred = obstacles
            .iter()
            .any(|o| self.uav.distance(o.position) < MIN_ESCAPE_SEPARATION);
        if goal_blocked || centred {
            if !self.inside_sphere {
                self.log.events.push(Event {
                    t,
                    kind: EventKind::SolveSkipped,
                    detail: if goal_blocked {
                        "goal inside a safety sphere".into()
                    } else {
                        "vehicle at an obstacle centre".into()
                    },
                });
            }
            self.inside_sphere = true;
            return Ok(None);
        }
        self.inside_sphere = false;
        for (k, o) in obstacles.iter_mut().enumerate() {
            let r = self.uav - o.position;
            let dist = r.norm();
            if dist < o.radius {
                // Slide the sphere away along the centre-to-vehicle line until
                // the vehicle sits just outside it; the radius is unchanged.
                let shift = o.radius * ESCAPE_CLEARANCE - dist;
                o.position = o.position - r * (shift / dist);
                self.log.events.push(Event {
                    t,
                    kind: EventKind::EscapePlan,
                    detail: format!("obstacle {k} snapshot moved {shift:.4} m away from the vehicle"),
                });
            }
        }
        let post_switch = std::mem::take(&mut self.post_switch_pending);
        Ok(Some(Job {
            generation: self.generation,
            request_t: t,
            request: PlanRequest {
                start: self.uav,
                goal: self.goal(),
                obstacles,
            },
            previous: Some(self.plan.clone()),
            post_switch,
        }))
    }

    fn accept(&mut self, outcome: Outcome, t: f64) {
        let mut record = outcome.record;
        if outcome.generation != self.generation {
            // Planned toward a goal that has since been switched.
            self.log.solves.push(record);
            return;
        }
        if let Some(status) = record.warm_attempt {
            self.log.events.push(Event {
                t,
                kind: EventKind::ColdRetry,
                detail: format!("warm start ended {status:?}"),
            });
        }
        match record.plan.as_ref().filter(|p| p.converged()) {
            Some(plan) => {
                self.plan = plan.clone();
                record.completion_t = Some(t);
            }
            None => self.log.events.push(Event {
                t,
                kind: EventKind::DegradedMode,
                detail: format!(
                    "solve requested at {} ended {:?}; keeping previous plan",
                    record.request_t, record.status
                ),
            }),
        }
        self.log.solves.push(record);
    }

    /// Arrival handling; returns true when in-flight solves became stale.
    fn check_goal(&mut self, t: f64) -> bool {
        if self.uav.distance(self.goal()) > self.scn.goal_threshold {
            return false;
        }
        if self.target + 1 < self.route.len() {
            self.target += 1;
            self.log.events.push(Event {
                t,
                kind: EventKind::WaypointReached,
                detail: format!("heading to {:?}", self.goal().to_array()),
            });
        } else {
            self.log.legs_completed += 1;
            self.log.arrival_times.push(t);
            if !self.scn.boundary_switching {
                self.finished = true;
                return false;
            }
            self.route.reverse();
            self.target = 1;
            self.post_switch_pending = true;
            self.log.events.push(Event {
                t,
                kind: EventKind::BoundarySwitch,
                detail: format!("leg {} done", self.log.legs_completed),
            });
        }
        self.generation += 1;
        true
    }

    fn control_tick(&mut self, t: f64, dt: f64) -> Result<(), ModelError> {
        let u_opt = match self.scn.planner.command_mode {
            CommandMode::NodeZero => self.plan.node_controls[0],
            CommandMode::Interpolate => self.plan.control_at(&self.grid, t),
        };
        let mut obstacles = Vec::with_capacity(self.scn.obstacles.len());
        let mut apf_obstacles = Vec::with_capacity(self.scn.obstacles.len());
        for o in &self.scn.obstacles {
            let p = o.position(t)?;
            obstacles.push((p, self.uav.distance(p)));
            apf_obstacles.push(ApfObstacle {
                position: p,
                radius: o.safety_radius,
            });
        }
        let blend = blend_command(u_opt, self.uav, &apf_obstacles, &self.scn.apf, &mut self.apf_memory);
        for k in &blend.substituted {
            self.log.events.push(Event {
                t,
                kind: EventKind::ApfSubstitution,
                detail: format!("obstacle {k}"),
            });
        }
        let b = &self.scn.bounds;
        let u_cmd = blend.command.clamp(b.cmd_lo, b.cmd_hi);
        self.log.ticks.push(TickRecord {
            t,
            uav: self.uav,
            u_opt,
            u_cmd,
            obstacles,
            goal: self.goal(),
            plan_epoch: self.plan.epoch,
        });
        self.uav = dynamics_step_exact(self.uav, u_cmd, &self.scn.dynamics, dt)?;
        Ok(())
    }
}

/// Runs the closed loop for the scenario's duration.
pub fn run(scn: &ScenarioConfig, opts: &RunOptions) -> Result<SimLog, ExecError> {
    let scn = seeded_scenario(scn, opts.seed);
    let grid = Arc::new(make_grid(scn.grid_order).map_err(NlpError::from)?);
    let ctx = PlannerCtx {
        grid: grid.clone(),
        setup: scn.problem_setup(),
        params: scn.solver,
        options: scn.planner,
    };

    let mut route = vec![scn.start];
    route.extend(&scn.waypoints);
    route.push(scn.goal);

    // Initial synchronous solve.
    let request = PlanRequest {
        start: scn.start,
        goal: route[1],
        obstacles: snapshot(&scn, 0.0)?,
    };
    let first = run_job(
        &ctx,
        Job {
            generation: 0,
            request_t: 0.0,
            request: request.clone(),
            previous: None,
            post_switch: false,
        },
    );
    let plan = match &first.record.plan {
        Some(p) => p.clone(),
        None => {
            // Surface the precise reason.
            assemble(&ctx.setup, &grid, &request)?;
            make_initial_guess(&ctx.setup, &grid, &request, None)?;
            unreachable!("initial solve produced no plan without an error");
        }
    };

    let mut lp = Loop {
        scn: &scn,
        grid: grid.clone(),
        uav: scn.start,
        plan,
        route,
        target: 1,
        generation: 0,
        post_switch_pending: false,
        inside_sphere: false,
        planner_disabled_logged: false,
        apf_memory: ApfMemory::new(scn.obstacles.len(), fallback_direction(scn.start, scn.goal)),
        log: SimLog {
            scenario: scn.clone(),
            ticks: Vec::new(),
            solves: Vec::new(),
            events: Vec::new(),
            legs_completed: 0,
            arrival_times: Vec::new(),
            tick_wall_intervals: Vec::new(),
        },
        finished: false,
    };
    let mut first_record = first.record;
    let first_converged = first_record.status == SolveStatus::Converged;
    first_record.completion_t = Some(0.0);
    lp.log.solves.push(first_record);
    if !first_converged {
        lp.log.events.push(Event {
            t: 0.0,
            kind: EventKind::DegradedMode,
            detail: "initial solve did not converge; using its final iterate".into(),
        });
    }

    let dt = 1.0 / scn.controller_rate_hz;
    let duration = opts.duration.unwrap_or(scn.sim_duration);
    let n_ticks = (duration * scn.controller_rate_hz + 1e-9).floor() as usize;

    match opts.mode {
        Mode::Lockstep { solve_ticks } => {
            if solve_ticks == 0 {
                return Err(ExecError::SolveTicks);
            }
            let mut pending: Option<(usize, Outcome)> = None;
            for k in 0..n_ticks {
                let t = k as f64 * dt;
                if lp.check_goal(t) {
                    if let Some((_, o)) = pending.take() {
                        lp.accept(o, t);
                    }
                }
                if lp.finished {
                    break;
                }
                if pending.as_ref().is_some_and(|(due, _)| *due <= k) {
                    let (_, o) = pending.take().unwrap();
                    lp.accept(o, t);
                }
                if pending.is_none() {
                    if let Some(job) = lp.new_job(t, opts.planner_cutoff)? {
                        pending = Some((k + solve_ticks, run_job(&ctx, job)));
                    }
                }
                lp.control_tick(t, dt)?;
            }
        }
        Mode::Realtime => run_realtime(&mut lp, ctx, opts, n_ticks, dt)?,
    }
    Ok(lp.log)
}

/// Lets the controller thread win the core as soon as its tick is due.
#[cfg(target_os = "linux")]
fn lower_thread_priority() {
    // Linux applies nice values per thread; 0 names the calling one.
    // Failure only costs pacing, so the result is ignored.
    unsafe {
        libc::setpriority(libc::PRIO_PROCESS, 0, PLANNER_NICE);
    }
}

#[cfg(not(target_os = "linux"))]
fn lower_thread_priority() {}

#[cfg(target_os = "linux")]
const PLANNER_NICE: libc::c_int = 10;

fn run_realtime(
    lp: &mut Loop<'_>,
    ctx: PlannerCtx,
    opts: &RunOptions,
    n_ticks: usize,
    dt: f64,
) -> Result<(), ExecError> {
    let (job_tx, job_rx) = mpsc::channel::<Job>();
    let (out_tx, out_rx) = mpsc::channel::<Outcome>();
    let planner = thread::spawn(move || {
        lower_thread_priority();
        for job in job_rx {
            if out_tx.send(run_job(&ctx, job)).is_err() {
                break;
            }
        }
    });

    let min_launch_gap = 1.0 / lp.scn.planner_rate_hz;
    let mut busy = false;
    let mut last_launch = f64::NEG_INFINITY;
    let origin = Instant::now();
    let mut prev_tick: Option<Instant> = None;
    let tick = Duration::from_secs_f64(dt);
    for k in 0..n_ticks {
        let deadline = origin + tick * k as u32;
        let now = Instant::now();
        if deadline > now {
            thread::sleep(deadline - now);
        }
        let now = Instant::now();
        if let Some(p) = prev_tick {
            lp.log.tick_wall_intervals.push((now - p).as_secs_f64());
        }
        prev_tick = Some(now);

        let t = k as f64 * dt;
        lp.check_goal(t);
        if lp.finished {
            break;
        }
        while let Ok(o) = out_rx.try_recv() {
            busy = false;
            lp.accept(o, t);
        }
        if !busy && t - last_launch >= min_launch_gap - 1e-9 {
            if let Some(job) = lp.new_job(t, opts.planner_cutoff)? {
                busy = true;
                last_launch = t;
                job_tx.send(job).expect("planner thread alive");
            }
        }
        lp.control_tick(t, dt)?;
    }
    drop(job_tx);
    for o in out_rx.iter() {
        lp.log.solves.push(o.record);
    }
    planner.join().expect("planner thread panicked");
    Ok(())
}

/// Independent lockstep runs, one per seed, spread over rayon.
#[cfg(feature = "parallel")]
pub fn run_seeds(scn: &ScenarioConfig, opts: &RunOptions, seeds: &[u64]) -> Vec<Result<SimLog, ExecError>> {
    use rayon::prelude::*;
    seeds
        .par_iter()
        .map(|&s| run(scn, &RunOptions { seed: Some(s), ..*opts }))
        .collect()
}

#[cfg(not(feature = "parallel"))]
pub fn run_seeds(scn: &ScenarioConfig, opts: &RunOptions, seeds: &[u64]) -> Vec<Result<SimLog, ExecError>> {
    run_seeds_seq(scn, opts, seeds)
}

pub fn run_seeds_seq(scn: &ScenarioConfig, opts: &RunOptions, seeds: &[u64]) -> Vec<Result<SimLog, ExecError>> {
    seeds
        .iter()
        .map(|&s| run(scn, &RunOptions { seed: Some(s), ..*opts }))
        .collect()
}

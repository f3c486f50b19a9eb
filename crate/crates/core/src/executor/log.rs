use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::config::ScenarioConfig;
use crate::model::Vec3;
use crate::nlp::{KktResiduals, ObstacleSnapshot, PlanSolution, SolveStatus};

/// One controller tick.
#[derive(Debug, Clone, PartialEq)]
pub struct TickRecord {
    pub t: f64,
    pub uav: Vec3,
    pub u_opt: Vec3,
    pub u_cmd: Vec3,
    /// Obstacle position and UAV-to-centre distance.
    pub obstacles: Vec<(Vec3, f64)>,
    pub goal: Vec3,
    /// Request time of the plan in use.
    pub plan_epoch: f64,
}

/// One planner solve.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SolveRecord {
    pub request_t: f64,
    /// Simulation time at which the result was published, if it was.
    pub completion_t: Option<f64>,
    pub iterations: usize,
    pub outer_iterations: usize,
    pub status: SolveStatus,
    pub delta_t: f64,
    pub kkt: KktResiduals,
    /// Wall-clock seconds.
    pub solve_time: f64,
    pub warm: bool,
    /// First solve after a boundary switch.
    pub post_switch: bool,
    /// Status of the warm attempt when it failed and a cold solve replaced it.
    pub warm_attempt: Option<SolveStatus>,
    pub start: Vec3,
    pub goal: Vec3,
    pub obstacles: Vec<ObstacleSnapshot>,
    #[serde(skip)]
    pub plan: Option<PlanSolution>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EventKind {
    /// The solve result was not usable; the previous plan stays in force.
    DegradedMode,
    /// The goal was inside a safety sphere, or the vehicle at an obstacle
    /// centre, at request time; no solve launched.
    SolveSkipped,
    /// The vehicle was inside a safety sphere; that snapshot was moved so the
    /// vehicle starts just outside it.
    EscapePlan,
    /// A warm-started solve failed and was redone from a cold guess.
    ColdRetry,
    BoundarySwitch,
    WaypointReached,
    /// APF direction undefined for an obstacle; a substitute was used.
    ApfSubstitution,
    PlannerDisabled,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Event {
    pub t: f64,
    pub kind: EventKind,
    pub detail: String,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SimLog {
    pub scenario: ScenarioConfig,
    pub ticks: Vec<TickRecord>,
    pub solves: Vec<SolveRecord>,
    pub events: Vec<Event>,
    pub legs_completed: usize,
    /// Simulation time at which each leg ended.
    pub arrival_times: Vec<f64>,
    /// Wall-clock seconds between consecutive ticks (realtime mode only).
    pub tick_wall_intervals: Vec<f64>,
}

#[derive(Serialize)]
struct Sidecar<'a> {
    scenario: &'a ScenarioConfig,
    legs_completed: usize,
    arrival_times: &'a [f64],
    solves: &'a [SolveRecord],
    events: &'a [Event],
}

impl SimLog {
    pub fn csv_header(n_obstacles: usize) -> Vec<String> {
        let mut h: Vec<String> = [
            "t", "uav_x", "uav_y", "uav_z", "uopt_x", "uopt_y", "uopt_z", "ucmd_x", "ucmd_y", "ucmd_z",
        ]
        .iter()
        .map(|s| s.to_string())
        .collect();
        for k in 0..n_obstacles {
            for c in ["x", "y", "z", "sep"] {
                h.push(format!("obs{k}_{c}"));
            }
        }
        h.extend(["goal_x", "goal_y", "goal_z", "plan_epoch"].map(String::from));
        h
    }

    /// One row per tick; floats in shortest round-trip form.
    pub fn write_csv<W: Write>(&self, out: W) -> csv::Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(Self::csv_header(self.scenario.obstacles.len()))?;
        let mut row: Vec<String> = Vec::new();
        for r in &self.ticks {
            row.clear();
            row.push(r.t.to_string());
            for v in [r.uav, r.u_opt, r.u_cmd] {
                row.extend(v.to_array().iter().map(f64::to_string));
            }
            for (p, sep) in &r.obstacles {
                row.extend(p.to_array().iter().map(f64::to_string));
                row.push(sep.to_string());
            }
            row.extend(r.goal.to_array().iter().map(f64::to_string));
            row.push(r.plan_epoch.to_string());
            w.write_record(&row)?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn write_sidecar<W: Write>(&self, out: W) -> serde_json::Result<()> {
        serde_json::to_writer_pretty(
            out,
            &Sidecar {
                scenario: &self.scenario,
                legs_completed: self.legs_completed,
                arrival_times: &self.arrival_times,
                solves: &self.solves,
                events: &self.events,
            },
        )
    }
}

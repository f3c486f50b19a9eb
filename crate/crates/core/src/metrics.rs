//! Summary statistics of a closed-loop run.

use serde::{Deserialize, Serialize};

use crate::executor::SimLog;
use crate::nlp::SolveStatus;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunMetrics {
    /// Smallest vehicle-to-obstacle-centre distance over all ticks, m.
    pub min_separation: f64,
    /// Smallest separation divided by that obstacle's safety radius.
    pub min_separation_ratio: f64,
    pub arrival_times: Vec<f64>,
    pub legs_completed: usize,
    pub solve_time_median: f64,
    pub solve_time_p95: f64,
    pub solver_success_rate: f64,
    /// Ticks with some separation below the safety radius.
    pub collision_count: usize,
    pub solves: usize,
    pub degraded_events: usize,
    pub duration: f64,
}

/// Nearest-rank percentile of an unsorted sample; NaN when empty.
pub fn percentile(values: &[f64], q: f64) -> f64 {
    if values.is_empty() {
        return f64::NAN;
    }
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let rank = ((q * v.len() as f64).ceil() as usize).clamp(1, v.len());
    v[rank - 1]
}

impl RunMetrics {
    pub fn from_log(log: &SimLog) -> Self {
        let radii: Vec<f64> = log.scenario.obstacles.iter().map(|o| o.safety_radius).collect();
        let mut min_separation = f64::INFINITY;
        let mut min_ratio = f64::INFINITY;
        let mut collision_count = 0;
        for r in &log.ticks {
            let mut hit = false;
            for ((_, sep), radius) in r.obstacles.iter().zip(&radii) {
                min_separation = min_separation.min(*sep);
                min_ratio = min_ratio.min(sep / radius);
                hit |= sep < radius;
            }
            collision_count += hit as usize;
        }
        let times: Vec<f64> = log.solves.iter().map(|s| s.solve_time).collect();
        let converged = log.solves.iter().filter(|s| s.status == SolveStatus::Converged).count();
        Self {
            min_separation,
            min_separation_ratio: min_ratio,
            arrival_times: log.arrival_times.clone(),
            legs_completed: log.legs_completed,
            solve_time_median: percentile(&times, 0.5),
            solve_time_p95: percentile(&times, 0.95),
            solver_success_rate: if log.solves.is_empty() {
                0.0
            } else {
                converged as f64 / log.solves.len() as f64
            },
            collision_count,
            solves: log.solves.len(),
            degraded_events: log
                .events
                .iter()
                .filter(|e| e.kind == crate::executor::EventKind::DegradedMode)
                .count(),
            duration: log.ticks.last().map_or(0.0, |r| r.t),
        }
    }
}

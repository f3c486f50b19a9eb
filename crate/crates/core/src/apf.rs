//! Sigmoid artificial potential field applied on top of the planner's command.

use serde::{Deserialize, Serialize};

use crate::model::Vec3;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ApfParams {
    /// Range scale applied to the safety radius.
    #[serde(default = "default_alpha")]
    pub alpha: f64,
    /// Offset subtracted from the sigmoid.
    #[serde(default = "default_eta")]
    pub eta: f64,
    /// Drop the small attraction the raw field has far from the obstacle.
    #[serde(default = "default_clamp")]
    pub clamp_nonnegative: bool,
}

fn default_alpha() -> f64 {
    1.875
}

fn default_eta() -> f64 {
    0.029
}

fn default_clamp() -> bool {
    true
}

impl Default for ApfParams {
    fn default() -> Self {
        Self {
            alpha: default_alpha(),
            eta: default_eta(),
            clamp_nonnegative: default_clamp(),
        }
    }
}

/// `0.5 (1 + tanh(alpha R - dist)) - eta`, optionally clamped at zero.
pub fn repulsive_magnitude(dist: f64, radius: f64, p: &ApfParams) -> f64 {
    let f = 0.5 * (1.0 + (p.alpha * radius - dist).tanh()) - p.eta;
    if p.clamp_nonnegative {
        f.max(0.0)
    } else {
        f
    }
}

/// Below this separation the push direction is taken from history.
pub const MIN_DIRECTION_NORM: f64 = 1e-9;

/// Obstacle as seen by the field at one instant.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ApfObstacle {
    pub position: Vec3,
    pub radius: f64,
}

/// Outcome of one blend, with any direction substitutions that happened.
#[derive(Debug, Clone, PartialEq)]
pub struct Blend {
    pub command: Vec3,
    /// Obstacle indices whose direction was undefined this tick.
    pub substituted: Vec<usize>,
}

/// Keeps the last well-defined push direction per obstacle.
#[derive(Debug, Clone, Default)]
pub struct ApfMemory {
    last_dirs: Vec<Option<Vec3>>,
    fallback: Option<Vec3>,
}

impl ApfMemory {
    pub fn new(n_obstacles: usize, fallback: Vec3) -> Self {
        Self {
            last_dirs: vec![None; n_obstacles],
            fallback: Some(fallback),
        }
    }
}

/// `u_opt + sum_k F_k r_k / |r_k|` with `r_k = uav - obs_k`.
///
/// Clipping to the command bounds is left to the caller.
pub fn blend_command(
    u_opt: Vec3,
    uav_pos: Vec3,
    obstacles: &[ApfObstacle],
    p: &ApfParams,
    memory: &mut ApfMemory,
) -> Blend {
    if memory.last_dirs.len() < obstacles.len() {
        memory.last_dirs.resize(obstacles.len(), None);
    }
    let mut cmd = u_opt;
    let mut substituted = Vec::new();
    for (k, o) in obstacles.iter().enumerate() {
        let r = uav_pos - o.position;
        let dist = r.norm();
        let dir = if dist < MIN_DIRECTION_NORM {
            substituted.push(k);
            memory.last_dirs[k]
                .or(memory.fallback)
                .unwrap_or(Vec3::new(1.0, 0.0, 0.0))
        } else {
            let d = r * (1.0 / dist);
            memory.last_dirs[k] = Some(d);
            d
        };
        cmd += dir * repulsive_magnitude(dist, o.radius, p);
    }
    Blend {
        command: cmd,
        substituted,
    }
}

/// [`blend_command`] without direction memory, for one-shot use.
pub fn blend_once(u_opt: Vec3, uav_pos: Vec3, obstacles: &[ApfObstacle], p: &ApfParams) -> Vec3 {
    let mut mem = ApfMemory::default();
    blend_command(u_opt, uav_pos, obstacles, p, &mut mem).command
}

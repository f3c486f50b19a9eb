//! Domain types and the first-order position-command dynamics of the vehicle.

use std::ops::{Add, AddAssign, Index, Mul, Neg, Sub};

use serde::{Deserialize, Deserializer, Serialize, Serializer};
use thiserror::Error;

use crate::autodiff::Scalar;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum ModelError {
    #[error("time step must be positive, got {0}")]
    NonPositiveStep(f64),
    #[error("time {t} s is outside the recorded obstacle track [{start}, {end}]")]
    OutsideTrack { t: f64, start: f64, end: f64 },
    #[error("negative time {0} s")]
    NegativeTime(f64),
}

/// Three-component vector; positions in meters, velocities in m/s.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct Vec3<S = f64> {
    pub x: S,
    pub y: S,
    pub z: S,
}

impl<S> Vec3<S> {
    pub const fn new(x: S, y: S, z: S) -> Self {
        Self { x, y, z }
    }
}

impl<S: Copy> Vec3<S> {
    pub fn to_array(self) -> [S; 3] {
        [self.x, self.y, self.z]
    }

    pub fn from_array(a: [S; 3]) -> Self {
        Self::new(a[0], a[1], a[2])
    }

    pub fn map<T>(self, f: impl Fn(S) -> T) -> Vec3<T> {
        Vec3::new(f(self.x), f(self.y), f(self.z))
    }

    pub fn zip_map<T: Copy, U>(self, other: Vec3<T>, f: impl Fn(S, T) -> U) -> Vec3<U> {
        Vec3::new(f(self.x, other.x), f(self.y, other.y), f(self.z, other.z))
    }
}

impl<S: Scalar> Vec3<S> {
    pub fn splat(v: S) -> Self {
        Self::new(v, v, v)
    }

    pub fn dot(self, o: Self) -> S {
        self.x * o.x + self.y * o.y + self.z * o.z
    }

    pub fn norm_squared(self) -> S {
        self.dot(self)
    }

    /// Euclidean norm; faults under differentiation at the zero vector.
    pub fn norm(self) -> S {
        self.norm_squared().norm_sqrt()
    }

    pub fn scale(self, s: S) -> Self {
        Self::new(self.x * s, self.y * s, self.z * s)
    }

    pub fn lift(v: Vec3<f64>) -> Self {
        v.map(S::cst)
    }

    pub fn values(self) -> Vec3<f64> {
        self.map(|s| s.value())
    }
}

impl Vec3<f64> {
    pub const ZERO: Self = Self::new(0.0, 0.0, 0.0);

    pub fn is_finite(self) -> bool {
        self.x.is_finite() && self.y.is_finite() && self.z.is_finite()
    }

    pub fn distance(self, o: Self) -> f64 {
        (self - o).norm()
    }

    pub fn cross(self, o: Self) -> Self {
        Self::new(
            self.y * o.z - self.z * o.y,
            self.z * o.x - self.x * o.z,
            self.x * o.y - self.y * o.x,
        )
    }

    /// Unit vector, or `None` for (near) zero input.
    pub fn normalized(self) -> Option<Self> {
        let n = self.norm();
        if n > 1e-300 && n.is_finite() {
            Some(self * (1.0 / n))
        } else {
            None
        }
    }

    pub fn clamp(self, lo: Self, hi: Self) -> Self {
        Self::new(
            self.x.clamp(lo.x, hi.x),
            self.y.clamp(lo.y, hi.y),
            self.z.clamp(lo.z, hi.z),
        )
    }

    pub fn max_abs(self) -> f64 {
        self.x.abs().max(self.y.abs()).max(self.z.abs())
    }
}

impl<S: Scalar> Add for Vec3<S> {
    type Output = Self;
    fn add(self, o: Self) -> Self {
        Self::new(self.x + o.x, self.y + o.y, self.z + o.z)
    }
}

impl<S: Scalar> AddAssign for Vec3<S> {
    fn add_assign(&mut self, o: Self) {
        *self = *self + o;
    }
}

impl<S: Scalar> Sub for Vec3<S> {
    type Output = Self;
    fn sub(self, o: Self) -> Self {
        Self::new(self.x - o.x, self.y - o.y, self.z - o.z)
    }
}

impl<S: Scalar> Neg for Vec3<S> {
    type Output = Self;
    fn neg(self) -> Self {
        Self::new(-self.x, -self.y, -self.z)
    }
}

impl<S: Scalar> Mul<f64> for Vec3<S> {
    type Output = Self;
    fn mul(self, s: f64) -> Self {
        Self::new(self.x * s, self.y * s, self.z * s)
    }
}

impl<S> Index<usize> for Vec3<S> {
    type Output = S;
    fn index(&self, i: usize) -> &S {
        match i {
            0 => &self.x,
            1 => &self.y,
            2 => &self.z,
            _ => panic!("Vec3 index {i} out of range"),
        }
    }
}

impl Serialize for Vec3<f64> {
    fn serialize<Ser: Serializer>(&self, s: Ser) -> Result<Ser::Ok, Ser::Error> {
        self.to_array().serialize(s)
    }
}

impl<'de> Deserialize<'de> for Vec3<f64> {
    fn deserialize<D: Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        <[f64; 3]>::deserialize(d).map(Vec3::from_array)
    }
}

/// Per-axis gains of the position-command loop, in 1/s.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DynamicsParams {
    pub kx: f64,
    pub ky: f64,
    pub kz: f64,
}

impl Default for DynamicsParams {
    fn default() -> Self {
        Self {
            kx: 1.0,
            ky: 1.0,
            kz: 1.0,
        }
    }
}

impl DynamicsParams {
    pub fn gains(&self) -> Vec3 {
        Vec3::new(self.kx, self.ky, self.kz)
    }
}

/// Box bounds on position, commanded position and velocity.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Bounds {
    pub pos_lo: Vec3,
    pub pos_hi: Vec3,
    pub cmd_lo: Vec3,
    pub cmd_hi: Vec3,
    pub vel_lo: Vec3,
    pub vel_hi: Vec3,
}

impl Default for Bounds {
    fn default() -> Self {
        Self {
            pos_lo: Vec3::new(-2.5, -2.5, 0.25),
            pos_hi: Vec3::new(2.5, 2.5, 1.75),
            cmd_lo: Vec3::new(-2.5, -2.5, 0.25),
            cmd_hi: Vec3::new(2.5, 2.5, 1.75),
            vel_lo: Vec3::new(-0.5, -0.5, -0.5),
            vel_hi: Vec3::new(0.5, 0.5, 0.5),
        }
    }
}

impl Bounds {
    pub fn contains_position(&self, p: Vec3) -> bool {
        (0..3).all(|a| p[a] >= self.pos_lo[a] && p[a] <= self.pos_hi[a])
    }
}

/// How an obstacle moves.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ObstacleTrajectory {
    Fixed {
        position: Vec3,
    },
    /// Horizontal circle around `center`, lifted by `height`.
    Circular {
        center: Vec3,
        radius: f64,
        angular_speed: f64,
        height: f64,
        #[serde(default)]
        phase: f64,
    },
    /// Recorded track, linearly interpolated; `times` strictly increasing.
    Sampled {
        times: Vec<f64>,
        positions: Vec<Vec3>,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Obstacle {
    pub trajectory: ObstacleTrajectory,
    /// Radius of the sphere the vehicle must stay out of, meters.
    pub safety_radius: f64,
}

impl Obstacle {
    pub fn fixed(position: Vec3, safety_radius: f64) -> Self {
        Self {
            trajectory: ObstacleTrajectory::Fixed { position },
            safety_radius,
        }
    }

    pub fn position(&self, t: f64) -> Result<Vec3, ModelError> {
        obstacle_position(self, t)
    }

    /// Velocity by differencing the trajectory model over a short window.
    pub fn velocity(&self, t: f64) -> Result<Vec3, ModelError> {
        match &self.trajectory {
            ObstacleTrajectory::Fixed { .. } => Ok(Vec3::ZERO),
            ObstacleTrajectory::Circular {
                radius,
                angular_speed,
                phase,
                ..
            } => {
                let a = angular_speed * t + phase;
                Ok(Vec3::new(-a.sin(), a.cos(), 0.0) * (radius * angular_speed))
            }
            ObstacleTrajectory::Sampled { times, .. } => {
                let h = 1e-3;
                let lo = (t - h).max(times[0]);
                let hi = (t + h).min(*times.last().unwrap());
                if hi <= lo {
                    return Ok(Vec3::ZERO);
                }
                Ok((self.position(hi)? - self.position(lo)?) * (1.0 / (hi - lo)))
            }
        }
    }

    /// Smallest distance between `p` and any point the obstacle ever occupies.
    pub fn min_distance_to_track(&self, p: Vec3) -> f64 {
        match &self.trajectory {
            ObstacleTrajectory::Fixed { position } => p.distance(*position),
            ObstacleTrajectory::Circular {
                center, radius, height, ..
            } => {
                let c = *center + Vec3::new(0.0, 0.0, *height);
                let d = p - c;
                let planar = (d.x * d.x + d.y * d.y).sqrt();
                ((planar - radius).powi(2) + d.z * d.z).sqrt()
            }
            ObstacleTrajectory::Sampled { positions, .. } => {
                if positions.len() == 1 {
                    return p.distance(positions[0]);
                }
                positions
                    .windows(2)
                    .map(|w| crate::geometry::point_segment_distance(w[0], w[1], p))
                    .fold(f64::INFINITY, f64::min)
            }
        }
    }
}

/// `diag(k) (u_cmd - x)`.
pub fn dynamics_rhs<S: Scalar>(x: Vec3<S>, u_cmd: Vec3<S>, p: &DynamicsParams) -> Vec3<S> {
    let e = u_cmd - x;
    Vec3::new(e.x * p.kx, e.y * p.ky, e.z * p.kz)
}

/// Exact flow of the linear dynamics over `dt` with the command held constant.
pub fn dynamics_step_exact(x: Vec3, u_cmd: Vec3, p: &DynamicsParams, dt: f64) -> Result<Vec3, ModelError> {
    if !(dt > 0.0) {
        return Err(ModelError::NonPositiveStep(dt));
    }
    let k = p.gains();
    Ok(Vec3::new(
        u_cmd.x + (x.x - u_cmd.x) * (-k.x * dt).exp(),
        u_cmd.y + (x.y - u_cmd.y) * (-k.y * dt).exp(),
        u_cmd.z + (x.z - u_cmd.z) * (-k.z * dt).exp(),
    ))
}

pub fn obstacle_position(o: &Obstacle, t: f64) -> Result<Vec3, ModelError> {
    if t < 0.0 {
        return Err(ModelError::NegativeTime(t));
    }
    match &o.trajectory {
        ObstacleTrajectory::Fixed { position } => Ok(*position),
        ObstacleTrajectory::Circular {
            center,
            radius,
            angular_speed,
            height,
            phase,
        } => {
            let a = angular_speed * t + phase;
            Ok(*center + Vec3::new(radius * a.cos(), radius * a.sin(), *height))
        }
        ObstacleTrajectory::Sampled { times, positions } => {
            let (start, end) = (times[0], *times.last().unwrap());
            if t < start || t > end {
                return Err(ModelError::OutsideTrack { t, start, end });
            }
            let i = times.partition_point(|&s| s <= t);
            if i == times.len() {
                return Ok(*positions.last().unwrap());
            }
            let (t0, t1) = (times[i - 1], times[i]);
            let w = (t - t0) / (t1 - t0);
            Ok(positions[i - 1] * (1.0 - w) + positions[i] * w)
        }
    }
}

//! Segment/sphere geometry, the smooth segment collision constraint and
//! initial-guess repair.
//!
//! The constraint functions are generic over [`Scalar`] so the NLP can
//! differentiate them. A constraint value `f <= 0` means satisfied.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::autodiff::Scalar;
use crate::model::Vec3;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum GeometryError {
    #[error("{which} point {point:?} lies inside the safety sphere at {center:?} (radius {radius})")]
    EndpointInside {
        which: &'static str,
        point: Vec3,
        center: Vec3,
        radius: f64,
    },
    #[error("could not move the guess clear of the sphere at {center:?} (radius {radius})")]
    CannotClear { center: Vec3, radius: f64 },
}

/// Line segment between two consecutive collocation points.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Segment<S = f64> {
    pub a: Vec3<S>,
    pub b: Vec3<S>,
}

impl<S> Segment<S> {
    pub fn new(a: Vec3<S>, b: Vec3<S>) -> Self {
        Self { a, b }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SmoothConstraintParams {
    /// Sigmoid sharpness of the on-segment window.
    #[serde(default = "default_delta")]
    pub delta: f64,
    /// Squared length (m^2) below which a segment counts as degenerate.
    #[serde(default = "default_epsilon_seg")]
    pub epsilon_seg: f64,
    /// Relative margin used when pushing guess points out of spheres.
    #[serde(default = "default_repair_margin")]
    pub repair_margin: f64,
}

fn default_delta() -> f64 {
    0.05
}

fn default_epsilon_seg() -> f64 {
    1e-12
}

fn default_repair_margin() -> f64 {
    0.05
}

impl Default for SmoothConstraintParams {
    fn default() -> Self {
        Self {
            delta: default_delta(),
            epsilon_seg: default_epsilon_seg(),
            repair_margin: default_repair_margin(),
        }
    }
}

/// Where the foot of the perpendicular from `p` falls along the segment.
///
/// `t` in `(0, 1)` means on the segment, otherwise on its extension.
pub fn projection_param<S: Scalar>(seg: &Segment<S>, p: Vec3<S>, epsilon_seg: f64) -> S {
    let ab = seg.b - seg.a;
    let len2 = ab.norm_squared();
    let denom = if len2.value() < epsilon_seg {
        len2 + epsilon_seg
    } else {
        len2
    };
    (p - seg.a).dot(ab) / denom
}

fn line_distance_with_t<S: Scalar>(seg: &Segment<S>, p: Vec3<S>, t: S) -> S {
    let ab = seg.b - seg.a;
    ((p - seg.a) - ab.scale(t)).norm()
}

/// Distance from `p` to the infinite line through the segment.
///
/// For a degenerate segment this is the point distance to `a`.
pub fn perpendicular_distance<S: Scalar>(seg: &Segment<S>, p: Vec3<S>, epsilon_seg: f64) -> S {
    let t = projection_param(seg, p, epsilon_seg);
    line_distance_with_t(seg, p, t)
}

/// The sigmoid-windowed segment constraint `0.5 * Gamma * (R - d)`.
///
/// `Gamma = tanh(t / delta) - tanh((t - 1) / delta)` is close to 2 while the
/// projection lies on the segment and decays to 0 on its extensions.
pub fn smooth_constraint<S: Scalar>(
    seg: &Segment<S>,
    obs_pos: Vec3<S>,
    radius: f64,
    params: &SmoothConstraintParams,
) -> S {
    let t = projection_param(seg, obs_pos, params.epsilon_seg);
    let d = line_distance_with_t(seg, obs_pos, t);
    let inv_delta = 1.0 / params.delta;
    let gamma = (t * inv_delta).tanh() - ((t - 1.0) * inv_delta).tanh();
    gamma * 0.5 * (-d + radius)
}

/// `R - |p - obs|`; satisfied when non-positive.
pub fn node_clearance<S: Scalar>(p: Vec3<S>, obs_pos: Vec3<S>, radius: f64) -> S {
    -(p - obs_pos).norm() + radius
}

/// Distance from `p` to the closed segment `[a, b]`.
pub fn point_segment_distance(a: Vec3, b: Vec3, p: Vec3) -> f64 {
    let ab = b - a;
    let len2 = ab.norm_squared();
    if len2 == 0.0 {
        return p.distance(a);
    }
    let t = ((p - a).dot(ab) / len2).clamp(0.0, 1.0);
    p.distance(a + ab * t)
}

/// Whether the smooth constraint reports a violation at solver tolerance `tol`.
pub fn is_violated(f: f64, tol: f64) -> bool {
    f > tol
}

/// The exact piecewise predicate the smooth constraint approximates.
pub fn exact_segment_violation(seg: &Segment, obs_pos: Vec3, radius: f64, epsilon_seg: f64) -> bool {
    let t = projection_param(seg, obs_pos, epsilon_seg);
    let d = perpendicular_distance(seg, obs_pos, epsilon_seg);
    t > 0.0 && t < 1.0 && d < radius
}

/// A sphere the guess must avoid.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Sphere {
    pub center: Vec3,
    pub radius: f64,
}

/// Smallest `distance - radius` over dense samples of every segment of the
/// polyline. Negative means some sample is inside a sphere.
pub fn polyline_clearance(points: &[Vec3], spheres: &[Sphere], samples_per_segment: usize) -> f64 {
    let per_segment = |w: &[Vec3]| segment_sample_clearance(w[0], w[1], spheres, samples_per_segment);
    #[cfg(feature = "parallel")]
    {
        use rayon::prelude::*;
        if points.len() > 8 {
            return points
                .par_windows(2)
                .map(per_segment)
                .reduce(|| f64::INFINITY, f64::min);
        }
    }
    points.windows(2).map(per_segment).fold(f64::INFINITY, f64::min)
}

/// Single-threaded [`polyline_clearance`].
pub fn polyline_clearance_seq(points: &[Vec3], spheres: &[Sphere], samples_per_segment: usize) -> f64 {
    points
        .windows(2)
        .map(|w| segment_sample_clearance(w[0], w[1], spheres, samples_per_segment))
        .fold(f64::INFINITY, f64::min)
}

fn segment_sample_clearance(a: Vec3, b: Vec3, spheres: &[Sphere], samples: usize) -> f64 {
    let samples = samples.max(2);
    let mut worst = f64::INFINITY;
    for k in 0..samples {
        let s = k as f64 / (samples - 1) as f64;
        let p = a + (b - a) * s;
        for sp in spheres {
            worst = worst.min(p.distance(sp.center) - sp.radius);
        }
    }
    worst
}

/// Unit vector perpendicular to `start -> goal`, horizontal when possible.
pub fn fallback_direction(start: Vec3, goal: Vec3) -> Vec3 {
    let c = goal - start;
    Vec3::new(-c.y, c.x, 0.0)
        .normalized()
        .unwrap_or(Vec3::new(1.0, 0.0, 0.0))
}

/// Pushes a polyline guess out of every sphere, keeping its endpoints.
///
/// Passes: radial push-out of interior points, perpendicular shift of
/// segments whose closest approach falls inside a sphere, then greedy
/// shortening wherever a chord over several points is already clear.
pub fn repair_guess(points: &[Vec3], spheres: &[Sphere], margin: f64) -> Result<Vec<Vec3>, GeometryError> {
    let mut pts = points.to_vec();
    if pts.len() < 2 || spheres.is_empty() {
        return Ok(pts);
    }
    let (first, last) = (pts[0], *pts.last().unwrap());
    for sp in spheres {
        for (which, p) in [("start", first), ("goal", last)] {
            if p.distance(sp.center) < sp.radius {
                return Err(GeometryError::EndpointInside {
                    which,
                    point: p,
                    center: sp.center,
                    radius: sp.radius,
                });
            }
        }
    }
    let fallback = fallback_direction(first, last);
    let n = pts.len();

    for _ in 0..200 {
        let mut changed = push_points_out(&mut pts, spheres, margin, fallback);
        changed |= shift_segments(&mut pts, spheres, margin, fallback)?;
        if !changed {
            break;
        }
    }

    shorten(&mut pts, spheres, margin);

    for sp in spheres {
        for w in pts.windows(2) {
            if point_segment_distance(w[0], w[1], sp.center) < sp.radius {
                return Err(GeometryError::CannotClear {
                    center: sp.center,
                    radius: sp.radius,
                });
            }
        }
    }
    debug_assert_eq!(pts.len(), n);
    Ok(pts)
}

fn push_points_out(pts: &mut [Vec3], spheres: &[Sphere], margin: f64, fallback: Vec3) -> bool {
    let n = pts.len();
    let mut changed = false;
    for p in pts.iter_mut().take(n - 1).skip(1) {
        for sp in spheres {
            let target = (1.0 + margin) * sp.radius;
            let r = *p - sp.center;
            if r.norm() < sp.radius {
                let dir = r.normalized().unwrap_or(fallback);
                *p = sp.center + dir * target;
                changed = true;
            }
        }
    }
    changed
}

fn shift_segments(pts: &mut [Vec3], spheres: &[Sphere], margin: f64, fallback: Vec3) -> Result<bool, GeometryError> {
    let n = pts.len();
    let mut changed = false;
    for i in 0..n - 1 {
        for sp in spheres {
            let seg = Segment::new(pts[i], pts[i + 1]);
            let t = projection_param(&seg, sp.center, 1e-12);
            if !(t > 0.0 && t < 1.0) {
                continue;
            }
            let d = perpendicular_distance(&seg, sp.center, 1e-12);
            if d >= sp.radius {
                continue;
            }
            let target = (1.0 + margin) * sp.radius;
            let foot = seg.a + (seg.b - seg.a) * t;
            let dir = (foot - sp.center).normalized().unwrap_or_else(|| {
                let u = (seg.b - seg.a).normalized().unwrap_or(fallback);
                (fallback - u * fallback.dot(u))
                    .normalized()
                    .unwrap_or_else(|| u.cross(Vec3::new(0.0, 0.0, 1.0)).normalized().unwrap_or(fallback))
            });
            let shift = target - d;
            let (move_a, move_b) = (i != 0, i + 1 != n - 1);
            match (move_a, move_b) {
                (true, true) => {
                    pts[i] += dir * shift;
                    pts[i + 1] += dir * shift;
                }
                // Only one end can move: the foot point moves by t (or 1 - t)
                // times the endpoint displacement.
                (false, true) => pts[i + 1] += dir * (shift / t.max(0.25)),
                (true, false) => pts[i] += dir * (shift / (1.0 - t).max(0.25)),
                (false, false) => {
                    return Err(GeometryError::CannotClear {
                        center: sp.center,
                        radius: sp.radius,
                    })
                }
            }
            changed = true;
        }
    }
    Ok(changed)
}

fn chord_is_clear(a: Vec3, b: Vec3, spheres: &[Sphere], margin: f64) -> bool {
    spheres
        .iter()
        .all(|sp| point_segment_distance(a, b, sp.center) >= (1.0 + margin) * sp.radius * (1.0 - 1e-9))
}

fn shorten(pts: &mut [Vec3], spheres: &[Sphere], margin: f64) {
    let n = pts.len();
    let mut i = 0;
    while i + 2 < n {
        let mut jumped = false;
        for j in (i + 2..n).rev() {
            if !chord_is_clear(pts[i], pts[j], spheres, margin) {
                continue;
            }
            let lengths: Vec<f64> = pts[i..=j].windows(2).map(|w| w[0].distance(w[1])).collect();
            let total: f64 = lengths.iter().sum();
            let chord = pts[i].distance(pts[j]);
            if total - chord > 1e-12 * total.max(1.0) {
                let (a, b) = (pts[i], pts[j]);
                let mut acc = 0.0;
                for (k, l) in lengths.iter().enumerate().take(j - i - 1) {
                    acc += l;
                    pts[i + k + 1] = a + (b - a) * (acc / total);
                }
            }
            i = j;
            jumped = true;
            break;
        }
        if !jumped {
            i += 1;
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::{jacobian_fn, Dual};
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn unit_x() -> Segment {
        Segment::new(Vec3::ZERO, Vec3::new(1.0, 0.0, 0.0))
    }

    fn params(delta: f64) -> SmoothConstraintParams {
        SmoothConstraintParams {
            delta,
            ..Default::default()
        }
    }

    #[test]
    fn projection_examples() {
        let s = unit_x();
        assert_eq!(projection_param(&s, Vec3::new(0.5, 1.0, 0.0), 1e-12), 0.5);
        assert_eq!(projection_param(&s, Vec3::new(2.0, 0.0, 0.0), 1e-12), 2.0);
        assert_eq!(projection_param(&s, Vec3::new(-1.0, 1.0, 0.0), 1e-12), -1.0);
    }

    #[test]
    fn perpendicular_examples() {
        let s = unit_x();
        assert_eq!(perpendicular_distance(&s, Vec3::new(0.5, 1.0, 0.0), 1e-12), 1.0);
        assert_eq!(perpendicular_distance(&s, Vec3::new(0.3, 0.0, 0.0), 1e-12), 0.0);
        let long = Segment::new(Vec3::ZERO, Vec3::new(2.0, 0.0, 0.0));
        let p = Vec3::new(3.0, 4.0, 0.0);
        assert!((perpendicular_distance(&long, p, 1e-12) - 4.0).abs() < 1e-15);
        assert!((point_segment_distance(long.a, long.b, p) - 17f64.sqrt()).abs() < 1e-15);
    }

    #[test]
    fn degenerate_segment_uses_point_distance() {
        let s = Segment::new(Vec3::splat(1.0), Vec3::splat(1.0));
        let p = Vec3::new(1.0, 4.0, 5.0);
        assert_eq!(projection_param(&s, p, 1e-12), 0.0);
        assert_eq!(perpendicular_distance(&s, p, 1e-12), 5.0);
    }

    #[test]
    fn smooth_constraint_examples() {
        let s = unit_x();
        let p = params(0.05);
        // Direct evaluation: Gamma = tanh(10) - tanh(-10), f = Gamma / 2 * (1.5 - 1).
        let gamma = 10f64.tanh() * 2.0;
        let f = smooth_constraint(&s, Vec3::new(0.5, 1.0, 0.0), 1.5, &p);
        assert!((f - 0.25 * gamma).abs() < 1e-15);
        assert!((f - 0.5).abs() < 1e-8);
        let far = smooth_constraint(&s, Vec3::new(-5.0, 1.0, 0.0), 1.5, &p);
        assert!(far.abs() < 1e-30);
        let clear = smooth_constraint(&s, Vec3::new(0.5, 2.0, 0.0), 1.5, &p);
        assert!((clear + 0.5).abs() < 1e-8);
    }

    #[test]
    fn node_clearance_examples() {
        assert_eq!(node_clearance(Vec3::new(2.0, 0.0, 0.0), Vec3::ZERO, 1.0), -1.0);
        assert_eq!(node_clearance(Vec3::ZERO, Vec3::ZERO, 1.0), 1.0);
        assert!(node_clearance(Vec3::new(0.6, 0.8, 0.0), Vec3::ZERO, 1.0).abs() < 1e-15);
    }

    #[test]
    fn chord_through_sphere_with_clear_endpoints() {
        let (a, b) = (Vec3::new(-1.0, 0.2, 0.0), Vec3::new(1.0, 0.2, 0.0));
        let obs = Vec3::ZERO;
        let r = 0.8;
        assert!(node_clearance(a, obs, r) < 0.0);
        assert!(node_clearance(b, obs, r) < 0.0);
        let f = smooth_constraint(&Segment::new(a, b), obs, r, &params(0.05));
        assert!(is_violated(f, 1e-6));
    }

    fn random_vec(rng: &mut ChaCha8Rng, s: f64) -> Vec3 {
        Vec3::new(
            rng.random_range(-s..s),
            rng.random_range(-s..s),
            rng.random_range(-s..s),
        )
    }

    #[test]
    fn smooth_constraint_gradient_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let p = params(0.05);
        let f = |v: &[f64]| {
            let seg = Segment::new(Vec3::new(v[0], v[1], v[2]), Vec3::new(v[3], v[4], v[5]));
            smooth_constraint(&seg, Vec3::new(v[6], v[7], v[8]), 0.7, &p)
        };
        let mut checked = 0;
        while checked < 200 {
            let a = random_vec(&mut rng, 1.0);
            let b = random_vec(&mut rng, 1.0);
            // Obstacle placed around t in [-0.3, 1.3] so the straddles of 0 and 1 are hit.
            let t = rng.random_range(-0.3..1.3);
            let off = random_vec(&mut rng, 0.8);
            let o = a + (b - a) * t + off;
            let x = [a.x, a.y, a.z, b.x, b.y, b.z, o.x, o.y, o.z];
            if perpendicular_distance(&Segment::new(a, b), o, 1e-12) < 1e-3 {
                continue;
            }
            let jac = jacobian_fn::<9, _>(
                |v: &[Dual<9>]| {
                    let seg = Segment::new(Vec3::new(v[0], v[1], v[2]), Vec3::new(v[3], v[4], v[5]));
                    vec![smooth_constraint(&seg, Vec3::new(v[6], v[7], v[8]), 0.7, &p)]
                },
                &x,
            )
            .unwrap();
            for j in 0..9 {
                let h = 1e-6;
                let mut xp = x;
                let mut xm = x;
                xp[j] += h;
                xm[j] -= h;
                let fd = (f(&xp) - f(&xm)) / (2.0 * h);
                let ad = jac.matrix[(0, j)];
                let scale = ad.abs().max(fd.abs()).max(1.0);
                assert!((ad - fd).abs() <= 1e-5 * scale, "j={j} ad={ad} fd={fd}");
            }
            checked += 1;
        }
    }

    #[test]
    fn repair_is_noop_without_obstacles() {
        let pts: Vec<Vec3> = (0..7).map(|i| Vec3::new(i as f64, 0.0, 0.0)).collect();
        assert_eq!(repair_guess(&pts, &[], 0.05).unwrap(), pts);
        // Spheres far away: still a no-op.
        let far = [Sphere {
            center: Vec3::new(0.0, 50.0, 0.0),
            radius: 1.0,
        }];
        assert_eq!(repair_guess(&pts, &far, 0.05).unwrap(), pts);
    }

    #[test]
    fn repair_pushes_single_point_radially() {
        let pts = vec![
            Vec3::new(1.05, -2.0, 0.0),
            Vec3::new(0.5, 0.0, 0.0),
            Vec3::new(1.05, 2.0, 0.0),
        ];
        let sp = [Sphere {
            center: Vec3::ZERO,
            radius: 1.0,
        }];
        let out = repair_guess(&pts, &sp, 0.05).unwrap();
        assert!((out[1] - Vec3::new(1.05, 0.0, 0.0)).max_abs() < 1e-12);
        assert_eq!(out[0], pts[0]);
        assert_eq!(out[2], pts[2]);
    }

    #[test]
    fn repair_straight_line_through_center() {
        let pts: Vec<Vec3> = (0..5).map(|i| Vec3::new(i as f64 - 2.0, 0.0, 0.0)).collect();
        let sp = [Sphere {
            center: Vec3::ZERO,
            radius: 1.0,
        }];
        let out = repair_guess(&pts, &sp, 0.05).unwrap();
        assert_eq!(out.len(), 5);
        assert_eq!(out[0], pts[0]);
        assert_eq!(out[4], pts[4]);
        // Deterministic fallback sends the centre point toward +y.
        assert!(out[2].y > 0.0);
        assert!(polyline_clearance(&out, &sp, 1000) >= 0.0);
    }

    #[test]
    fn repair_rejects_endpoint_inside() {
        let pts = vec![Vec3::ZERO, Vec3::new(3.0, 0.0, 0.0)];
        let sp = [Sphere {
            center: Vec3::ZERO,
            radius: 1.0,
        }];
        assert!(matches!(
            repair_guess(&pts, &sp, 0.05),
            Err(GeometryError::EndpointInside { which: "start", .. })
        ));
    }

    #[test]
    fn repair_random_blocked_polylines() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..200 {
            let r = rng.random_range(0.3..1.0);
            let center = random_vec(&mut rng, 0.3);
            let start = Vec3::new(-2.5, rng.random_range(-0.5..0.5), rng.random_range(-0.5..0.5));
            let goal = Vec3::new(2.5, rng.random_range(-0.5..0.5), rng.random_range(-0.5..0.5));
            let grid = crate::chebyshev::make_grid(rng.random_range(4..16)).unwrap();
            let pts: Vec<Vec3> = grid.nodes().iter().map(|&t| start + (goal - start) * t).collect();
            let sp = [Sphere { center, radius: r }];
            let out = repair_guess(&pts, &sp, 0.05).unwrap();
            assert_eq!(out.len(), pts.len());
            assert_eq!(out[0], start);
            assert_eq!(*out.last().unwrap(), goal);
            assert!(polyline_clearance(&out, &sp, 1000) >= 0.0);
        }
    }

    #[test]
    fn parallel_and_sequential_clearance_agree() {
        let pts: Vec<Vec3> = (0..40)
            .map(|i| Vec3::new(i as f64 * 0.1, (i as f64 * 0.3).sin(), 0.0))
            .collect();
        let sp = [
            Sphere {
                center: Vec3::new(1.0, 0.0, 0.0),
                radius: 0.4,
            },
            Sphere {
                center: Vec3::new(3.0, 1.0, 0.2),
                radius: 0.3,
            },
        ];
        assert_eq!(
            polyline_clearance(&pts, &sp, 200),
            polyline_clearance_seq(&pts, &sp, 200)
        );
    }

    fn vec3() -> impl Strategy<Value = Vec3> {
        (-2.0..2.0f64, -2.0..2.0f64, -2.0..2.0f64).prop_map(|(x, y, z)| Vec3::new(x, y, z))
    }

    proptest! {
        #[test]
        fn smooth_constraint_sign_away_from_bands(a in vec3(), b in vec3(), o in vec3(), r in 0.2..1.5f64) {
            let p = SmoothConstraintParams::default();
            let ab = b - a;
            prop_assume!(ab.norm() > 1e-3);
            let t = (o - a).dot(ab) / ab.dot(ab);
            let d = (o - (a + ab * t)).norm();
            let band = (-10.0 * p.delta..p.delta).contains(&t) || (1.0 - p.delta..1.0 + 10.0 * p.delta).contains(&t);
            prop_assume!(!band && (d - r).abs() > 1e-3);
            let f = smooth_constraint(&Segment::new(a, b), o, r, &p);
            prop_assert_eq!(is_violated(f, 1e-6), t > 0.0 && t < 1.0 && d < r);
        }

        #[test]
        fn smooth_constraint_never_exceeds_the_radius(a in vec3(), b in vec3(), o in vec3(), r in 0.1..1.5f64) {
            // the window is below 2, so f <= R - d <= R
            let f = smooth_constraint(&Segment::new(a, b), o, r, &SmoothConstraintParams::default());
            prop_assert!(f <= r + 1e-12);
        }

        #[test]
        fn repair_clears_and_keeps_endpoints(
            start in vec3(),
            goal in vec3(),
            center in vec3(),
            r in 0.1..0.8f64,
            n in 4usize..14,
        ) {
            let sp = [Sphere { center, radius: r }];
            prop_assume!(start.distance(center) > r && goal.distance(center) > r);
            let grid = crate::chebyshev::make_grid(n).unwrap();
            let pts: Vec<Vec3> = grid.nodes().iter().map(|&t| start + (goal - start) * t).collect();
            let out = repair_guess(&pts, &sp, 0.05).unwrap();
            prop_assert_eq!(out.len(), pts.len());
            prop_assert_eq!(out[0], pts[0]);
            prop_assert_eq!(out.last(), pts.last());
            prop_assert!(polyline_clearance_seq(&out, &sp, 1000) >= 0.0);
        }
    }
}

//! Curves, arc-length machinery, and orientation math shared by the rest of
//! the crate.
//!
//! Guidelines are authored as chains of cubic Hermite segments, densely
//! sampled into a polyline whose chord lengths give the empirical cumulative
//! arc-length. Orientations are unit quaternions compared with the geodesic
//! angle `2·arccos(|qa·qb|)`, which is invariant to the quaternion double
//! cover.

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Tolerance for accepting a quaternion as unit length.
pub const UNIT_QUAT_TOL: f64 = 1e-6;

#[derive(Debug, Error)]
pub enum GeometryError {
    #[error("curve parameter {0} outside [0, 1]")]
    ParamOutOfRange(f64),
    #[error("quaternion norm {0} deviates from 1 by more than {UNIT_QUAT_TOL}")]
    NonUnitQuaternion(f64),
    #[error("empty segment chain")]
    EmptyChain,
    #[error("dense sampling needs at least 2 points, got {0}")]
    TooFewSamples(usize),
    #[error("non-finite value in {0}")]
    NonFinite(&'static str),
}

/// A 3D point or vector in meters.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Vec3 {
    pub x: f64,
    pub y: f64,
    pub z: f64,
}

impl Vec3 {
    pub const ZERO: Vec3 = Vec3 { x: 0.0, y: 0.0, z: 0.0 };

    pub fn new(x: f64, y: f64, z: f64) -> Self {
        Vec3 { x, y, z }
    }

    pub fn dot(self, other: Vec3) -> f64 {
        self.x * other.x + self.y * other.y + self.z * other.z
    }

    pub fn norm(self) -> f64 {
        self.dot(self).sqrt()
    }

    pub fn distance(self, other: Vec3) -> f64 {
        (self - other).norm()
    }

    pub fn scale(self, s: f64) -> Vec3 {
        Vec3::new(self.x * s, self.y * s, self.z * s)
    }

    pub fn is_finite(self) -> bool {
        self.x.is_finite() && self.y.is_finite() && self.z.is_finite()
    }
}

impl std::ops::Add for Vec3 {
    type Output = Vec3;
    fn add(self, rhs: Vec3) -> Vec3 {
        Vec3::new(self.x + rhs.x, self.y + rhs.y, self.z + rhs.z)
    }
}

impl std::ops::Sub for Vec3 {
    type Output = Vec3;
    fn sub(self, rhs: Vec3) -> Vec3 {
        Vec3::new(self.x - rhs.x, self.y - rhs.y, self.z - rhs.z)
    }
}

/// Unit quaternion `(w, x, y, z)` representing a rotation.
///
/// `q` and `-q` represent the same rotation; every comparison in this crate
/// goes through [`quat_angle`], which absorbs the sign ambiguity.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct UnitQuaternion {
    pub w: f64,
    pub x: f64,
    pub y: f64,
    pub z: f64,
}

impl UnitQuaternion {
    pub const IDENTITY: UnitQuaternion = UnitQuaternion { w: 1.0, x: 0.0, y: 0.0, z: 0.0 };

    /// Builds a quaternion from raw components, normalizing them.
    ///
    /// Fails if the input norm is zero or non-finite.
    pub fn new_normalized(w: f64, x: f64, y: f64, z: f64) -> Result<Self, GeometryError> {
        let n = (w * w + x * x + y * y + z * z).sqrt();
        if !n.is_finite() || n == 0.0 {
            return Err(GeometryError::NonFinite("quaternion"));
        }
        Ok(UnitQuaternion { w: w / n, x: x / n, y: y / n, z: z / n })
    }

    pub fn dot(self, other: UnitQuaternion) -> f64 {
        self.w * other.w + self.x * other.x + self.y * other.y + self.z * other.z
    }

    pub fn norm(self) -> f64 {
        self.dot(self).sqrt()
    }

    pub fn neg(self) -> UnitQuaternion {
        UnitQuaternion { w: -self.w, x: -self.x, y: -self.y, z: -self.z }
    }

    fn check_unit(self) -> Result<(), GeometryError> {
        let n = self.norm();
        if (n - 1.0).abs() > UNIT_QUAT_TOL {
            return Err(GeometryError::NonUnitQuaternion(n));
        }
        Ok(())
    }
}

/// One cubic Hermite segment: endpoints and endpoint tangents.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct HermiteSegment {
    pub x0: Vec3,
    pub x1: Vec3,
    pub m0: Vec3,
    pub m1: Vec3,
}

impl HermiteSegment {
    pub fn new(x0: Vec3, x1: Vec3, m0: Vec3, m1: Vec3) -> Self {
        HermiteSegment { x0, x1, m0, m1 }
    }

    /// A straight segment whose parameterization is the linear interpolant.
    pub fn line(x0: Vec3, x1: Vec3) -> Self {
        let m = x1 - x0;
        HermiteSegment { x0, x1, m0: m, m1: m }
    }
}

/// A dense polyline sampled from a segment chain, with cumulative chord
/// lengths.
#[derive(Debug, Clone)]
pub struct DenseSampling {
    pub points: Vec<Vec3>,
    pub cum_lengths: Vec<f64>,
}

impl DenseSampling {
    /// Builds a sampling directly from an ordered polyline.
    pub fn from_polyline(points: Vec<Vec3>) -> Result<Self, GeometryError> {
        if points.len() < 2 {
            return Err(GeometryError::TooFewSamples(points.len()));
        }
        let mut cum_lengths = Vec::with_capacity(points.len());
        let mut acc = 0.0;
        cum_lengths.push(0.0);
        for i in 1..points.len() {
            if !points[i].is_finite() {
                return Err(GeometryError::NonFinite("polyline point"));
            }
            acc += points[i].distance(points[i - 1]);
            cum_lengths.push(acc);
        }
        Ok(DenseSampling { points, cum_lengths })
    }

    pub fn total_length(&self) -> f64 {
        *self.cum_lengths.last().expect("sampling is never empty")
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }
}

/// Evaluates the cubic Hermite curve at parameter `u ∈ [0, 1]`.
///
/// `p(u) = (2u³−3u²+1)·x0 + (u³−2u²+u)·m0 + (−2u³+3u²)·x1 + (u³−u²)·m1`
pub fn hermite_eval(seg: &HermiteSegment, u: f64) -> Result<Vec3, GeometryError> {
    if !(0.0..=1.0).contains(&u) {
        return Err(GeometryError::ParamOutOfRange(u));
    }
    let u2 = u * u;
    let u3 = u2 * u;
    let h00 = 2.0 * u3 - 3.0 * u2 + 1.0;
    let h10 = u3 - 2.0 * u2 + u;
    let h01 = -2.0 * u3 + 3.0 * u2;
    let h11 = u3 - u2;
    Ok(seg.x0.scale(h00) + seg.m0.scale(h10) + seg.x1.scale(h01) + seg.m1.scale(h11))
}

/// Analytic derivative `dp/du` of the Hermite curve.
///
/// Equals `m0` at `u = 0` and `m1` at `u = 1`.
pub fn hermite_tangent(seg: &HermiteSegment, u: f64) -> Result<Vec3, GeometryError> {
    if !(0.0..=1.0).contains(&u) {
        return Err(GeometryError::ParamOutOfRange(u));
    }
    let u2 = u * u;
    let d00 = 6.0 * u2 - 6.0 * u;
    let d10 = 3.0 * u2 - 4.0 * u + 1.0;
    let d01 = -6.0 * u2 + 6.0 * u;
    let d11 = 3.0 * u2 - 2.0 * u;
    Ok(seg.x0.scale(d00) + seg.m0.scale(d10) + seg.x1.scale(d01) + seg.m1.scale(d11))
}

/// Samples `n` points at uniform parameter spacing across a segment chain and
/// accumulates chord lengths.
///
/// The chain is treated as C0-joined: the global parameter traverses the
/// segments in order, one unit of parameter per segment.
pub fn sample_dense(chain: &[HermiteSegment], n: usize) -> Result<DenseSampling, GeometryError> {
    if chain.is_empty() {
        return Err(GeometryError::EmptyChain);
    }
    if n < 2 {
        return Err(GeometryError::TooFewSamples(n));
    }
    let segs = chain.len() as f64;
    let mut points = Vec::with_capacity(n);
    for i in 0..n {
        let s = i as f64 / (n - 1) as f64;
        let t = s * segs;
        let (idx, u) = if i == n - 1 {
            (chain.len() - 1, 1.0)
        } else {
            let idx = (t.floor() as usize).min(chain.len() - 1);
            (idx, t - idx as f64)
        };
        points.push(hermite_eval(&chain[idx], u)?);
    }
    DenseSampling::from_polyline(points)
}

/// Geodesic angle between two rotations: `2·arccos(|qa·qb|) ∈ [0, π]`.
///
/// The dot product is clamped to `[-1, 1]` so floating-point drift at
/// near-identical quaternions cannot produce NaN. For small angles the
/// arccos form loses half the significand, so the equivalent chord form
/// `4·asin(min(‖qa−qb‖, ‖qa+qb‖)/2)` is used there; identical inputs yield
/// exactly zero.
pub fn quat_angle(qa: UnitQuaternion, qb: UnitQuaternion) -> Result<f64, GeometryError> {
    qa.check_unit()?;
    qb.check_unit()?;
    let d = qa.dot(qb).abs().clamp(0.0, 1.0);
    if d < 0.7 {
        return Ok(2.0 * d.acos());
    }
    let diff = |a: UnitQuaternion, b: UnitQuaternion| {
        let (w, x, y, z) = (a.w - b.w, a.x - b.x, a.y - b.y, a.z - b.z);
        (w * w + x * x + y * y + z * z).sqrt()
    };
    let chord = diff(qa, qb).min(diff(qa, qb.neg()));
    Ok(4.0 * (0.5 * chord).clamp(0.0, 1.0).asin())
}

/// Rotation of `theta` radians about the lateral (pitch) axis.
///
/// Positive pitch tips the nose down in this crate's planar convention, so a
/// backflip sweeps the pitch from 0 to −2π.
pub fn quat_from_pitch(theta: f64) -> UnitQuaternion {
    let half = 0.5 * theta;
    UnitQuaternion { w: half.cos(), x: 0.0, y: half.sin(), z: 0.0 }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use proptest::prelude::*;
    use std::f64::consts::PI;

    fn seg(x0: [f64; 3], x1: [f64; 3], m0: [f64; 3], m1: [f64; 3]) -> HermiteSegment {
        HermiteSegment::new(
            Vec3::new(x0[0], x0[1], x0[2]),
            Vec3::new(x1[0], x1[1], x1[2]),
            Vec3::new(m0[0], m0[1], m0[2]),
            Vec3::new(m1[0], m1[1], m1[2]),
        )
    }

    #[test]
    fn hermite_endpoints() {
        let s = seg([0.0, 0.0, 0.0], [1.0, 0.0, 0.0], [1.0, 0.0, 1.0], [1.0, 0.0, -1.0]);
        assert_eq!(hermite_eval(&s, 0.0).unwrap(), s.x0);
        assert_eq!(hermite_eval(&s, 1.0).unwrap(), s.x1);
    }

    #[test]
    fn hermite_midpoint_hand_evaluated() {
        // Basis polynomials at u = 0.5 are (0.5, 0.125, 0.5, -0.125).
        let s = seg([0.0, 0.0, 0.0], [1.0, 0.0, 0.0], [1.0, 0.0, 1.0], [1.0, 0.0, -1.0]);
        let p = hermite_eval(&s, 0.5).unwrap();
        assert_relative_eq!(p.x, 0.5, epsilon = 1e-12);
        assert_relative_eq!(p.y, 0.0, epsilon = 1e-12);
        assert_relative_eq!(p.z, 0.25, epsilon = 1e-12);
    }

    #[test]
    fn hermite_out_of_range_is_error() {
        let s = HermiteSegment::line(Vec3::ZERO, Vec3::new(1.0, 0.0, 0.0));
        assert!(hermite_eval(&s, -0.001).is_err());
        assert!(hermite_eval(&s, 1.001).is_err());
        assert!(hermite_tangent(&s, 2.0).is_err());
    }

    #[test]
    fn tangent_endpoints_equal_specified_tangents() {
        let s = seg([0.3, -0.1, 0.2], [1.0, 2.0, 0.5], [0.4, 0.0, 1.3], [-1.0, 0.2, -0.1]);
        let t0 = hermite_tangent(&s, 0.0).unwrap();
        let t1 = hermite_tangent(&s, 1.0).unwrap();
        assert_relative_eq!(t0.distance(s.m0), 0.0, epsilon = 1e-12);
        assert_relative_eq!(t1.distance(s.m1), 0.0, epsilon = 1e-12);
    }

    #[test]
    fn straight_segment_tangent_is_constant() {
        let s = HermiteSegment::line(Vec3::ZERO, Vec3::new(1.0, 0.0, 0.0));
        for u in [0.0, 0.25, 0.5, 0.9, 1.0] {
            let t = hermite_tangent(&s, u).unwrap();
            assert_relative_eq!(t.x, 1.0, epsilon = 1e-12);
            assert_relative_eq!(t.y, 0.0, epsilon = 1e-12);
            assert_relative_eq!(t.z, 0.0, epsilon = 1e-12);
        }
        // Cross-check by central finite difference.
        let step = 1e-6;
        let p0 = hermite_eval(&s, 0.5 - step).unwrap();
        let p1 = hermite_eval(&s, 0.5 + step).unwrap();
        let fd = (p1 - p0).scale(1.0 / (2.0 * step));
        assert_relative_eq!(fd.x, 1.0, epsilon = 1e-6);
    }

    #[test]
    fn dense_sampling_of_unit_line() {
        let s = HermiteSegment::line(Vec3::ZERO, Vec3::new(1.0, 0.0, 0.0));
        let d = sample_dense(&[s], 1000).unwrap();
        assert_eq!(d.len(), 1000);
        assert_relative_eq!(d.total_length(), 1.0, epsilon = 1e-6);
        assert_eq!(d.cum_lengths[0], 0.0);
    }

    #[test]
    fn two_point_sampling_is_the_chord() {
        let s = HermiteSegment::line(Vec3::new(0.0, 1.0, 0.0), Vec3::new(3.0, 1.0, 4.0));
        let d = sample_dense(&[s], 2).unwrap();
        assert_eq!(d.cum_lengths[0], 0.0);
        assert_relative_eq!(d.cum_lengths[1], 5.0, epsilon = 1e-12);
    }

    #[test]
    fn empty_chain_is_error() {
        assert!(matches!(sample_dense(&[], 10), Err(GeometryError::EmptyChain)));
    }

    /// Adaptive Simpson quadrature of |dp/du| — the independent arc-length
    /// oracle used to validate chord-sum sampling.
    fn arc_length_quadrature(s: &HermiteSegment, a: f64, b: f64, depth: u32) -> f64 {
        let speed = |u: f64| hermite_tangent(s, u).unwrap().norm();
        let m = 0.5 * (a + b);
        let coarse = (b - a) / 6.0 * (speed(a) + 4.0 * speed(m) + speed(b));
        let lm = 0.5 * (a + m);
        let rm = 0.5 * (m + b);
        let left = (m - a) / 6.0 * (speed(a) + 4.0 * speed(lm) + speed(m));
        let right = (b - m) / 6.0 * (speed(m) + 4.0 * speed(rm) + speed(b));
        if depth == 0 || (left + right - coarse).abs() < 1e-12 {
            left + right
        } else {
            arc_length_quadrature(s, a, m, depth - 1) + arc_length_quadrature(s, m, b, depth - 1)
        }
    }

    #[test]
    fn quarter_circle_arc_length_near_pi_over_two() {
        // Circle-approximating Hermite segment: tangent magnitude 3·4(√2−1)/3
        // (the Bézier control offset scaled to Hermite form).
        let k = 4.0 * (2.0_f64.sqrt() - 1.0);
        let s = seg([1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, k, 0.0], [-k, 0.0, 0.0]);
        let sampled = sample_dense(&[s], 1000).unwrap().total_length();
        let oracle = arc_length_quadrature(&s, 0.0, 1.0, 20);
        assert_relative_eq!(sampled, oracle, max_relative = 1e-4);
        assert!((sampled - PI / 2.0).abs() / (PI / 2.0) < 0.01, "length {sampled}");
    }

    #[test]
    fn quat_angle_basic_cases() {
        let id = UnitQuaternion::IDENTITY;
        assert_relative_eq!(quat_angle(id, id).unwrap(), 0.0, epsilon = 1e-12);
        let pitch90 = quat_from_pitch(PI / 2.0);
        assert_relative_eq!(quat_angle(id, pitch90).unwrap(), PI / 2.0, epsilon = 1e-12);
        let q = quat_from_pitch(0.7);
        assert_relative_eq!(quat_angle(q, q.neg()).unwrap(), 0.0, epsilon = 1e-12);
    }

    #[test]
    fn quat_angle_rejects_non_unit() {
        let bad = UnitQuaternion { w: 1.0, x: 0.5, y: 0.0, z: 0.0 };
        assert!(quat_angle(bad, UnitQuaternion::IDENTITY).is_err());
    }

    #[test]
    fn pitch_quaternion_round_trip() {
        assert_eq!(quat_from_pitch(0.0), UnitQuaternion::IDENTITY);
        let half_turn = quat_from_pitch(PI);
        assert_relative_eq!(half_turn.w, 0.0, epsilon = 1e-15);
        assert_relative_eq!(half_turn.y, 1.0, epsilon = 1e-15);
        let theta = 17.0_f64.to_radians();
        let q = quat_from_pitch(theta);
        assert_relative_eq!(quat_angle(q, UnitQuaternion::IDENTITY).unwrap(), theta, epsilon = 1e-9);
    }

    proptest! {
        #[test]
        fn hermite_endpoint_exactness(
            coords in proptest::collection::vec(-10.0..10.0f64, 12),
        ) {
            let s = seg(
                [coords[0], coords[1], coords[2]],
                [coords[3], coords[4], coords[5]],
                [coords[6], coords[7], coords[8]],
                [coords[9], coords[10], coords[11]],
            );
            let p0 = hermite_eval(&s, 0.0).unwrap();
            let p1 = hermite_eval(&s, 1.0).unwrap();
            prop_assert!(p0.distance(s.x0) <= 1e-12);
            prop_assert!(p1.distance(s.x1) <= 1e-12);
        }

        #[test]
        fn tangent_matches_finite_differences(
            coords in proptest::collection::vec(-5.0..5.0f64, 12),
            u in 0.01..0.99f64,
        ) {
            let s = seg(
                [coords[0], coords[1], coords[2]],
                [coords[3], coords[4], coords[5]],
                [coords[6], coords[7], coords[8]],
                [coords[9], coords[10], coords[11]],
            );
            let h = 1e-6;
            let fd = (hermite_eval(&s, u + h).unwrap() - hermite_eval(&s, u - h).unwrap())
                .scale(1.0 / (2.0 * h));
            let an = hermite_tangent(&s, u).unwrap();
            let scale = an.norm().max(1.0);
            prop_assert!(fd.distance(an) / scale <= 1e-5);
        }

        #[test]
        fn cum_lengths_nondecreasing_and_chord_bounded(
            coords in proptest::collection::vec(-5.0..5.0f64, 12),
        ) {
            let s = seg(
                [coords[0], coords[1], coords[2]],
                [coords[3], coords[4], coords[5]],
                [coords[6], coords[7], coords[8]],
                [coords[9], coords[10], coords[11]],
            );
            let d = sample_dense(&[s], 250).unwrap();
            for w in d.cum_lengths.windows(2) {
                prop_assert!(w[1] >= w[0]);
            }
            prop_assert!(d.total_length() >= s.x0.distance(s.x1) - 1e-9);
        }

        #[test]
        fn quat_angle_is_a_sign_invariant_metric(
            a in -1.0..1.0f64, b in -1.0..1.0f64, c in -1.0..1.0f64,
            d in -1.0..1.0f64, e in -1.0..1.0f64, f in -1.0..1.0f64,
        ) {
            let qa = UnitQuaternion::new_normalized(1.0 + a.abs(), b, c, d).unwrap();
            let qb = UnitQuaternion::new_normalized(1.0 + d.abs(), e, f, a).unwrap();
            let qc = UnitQuaternion::new_normalized(1.0 + f.abs(), c, a, e).unwrap();
            let ab = quat_angle(qa, qb).unwrap();
            let ba = quat_angle(qb, qa).unwrap();
            prop_assert!((ab - ba).abs() <= 1e-12);
            // Sign flips of either argument are invisible.
            prop_assert!((quat_angle(qa.neg(), qb).unwrap() - ab).abs() <= 1e-12);
            prop_assert!((quat_angle(qa, qb.neg()).unwrap() - ab).abs() <= 1e-12);
            // Zero iff the rotations coincide up to sign.
            prop_assert!(quat_angle(qa, qa).unwrap() <= 1e-9);
            // Triangle inequality on the sampled triple.
            let ac = quat_angle(qa, qc).unwrap();
            let cb = quat_angle(qc, qb).unwrap();
            prop_assert!(ab <= ac + cb + 1e-9);
        }
    }
}

//! Guideline construction, waypoint progression, margin logic,
//! traveled-distance termination, and both key-orientation reward families.
//!
//! A guideline is an ordered list of waypoints `(p_i, d_i)` where `d_i` is the
//! cumulative arc-length up to waypoint `i`, paired with a reach margin. All
//! waypoints are expressed in the robot's base frame captured at the moment
//! the stunt is triggered. Progress along the guideline is measured by the
//! distance physically traveled by the base, not by time.

use crate::geometry::{quat_angle, DenseSampling, GeometryError, UnitQuaternion, Vec3};
use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Default angular threshold for position-based key terminations (rad).
pub const DEFAULT_THETA_THRES: f64 = 1.0;
/// Sequence target counts as reached below this angle (rad).
pub const DEFAULT_CAPTURE_THRESHOLD: f64 = 0.2;
/// Allowed non-monotone jitter before a sequence terminates the episode (rad).
pub const DEFAULT_HYSTERESIS: f64 = 0.05;

#[derive(Debug, Error)]
pub enum GuidelineError {
    #[error("guideline needs at least 2 waypoints, got {0}")]
    TooFewWaypoints(usize),
    #[error("cumulative distances must be strictly increasing at waypoint {0}")]
    NonMonotonicDistances(usize),
    #[error("margin must be positive, got {0}")]
    BadMargin(f64),
    #[error("waypoint count {k} out of range for {samples} dense samples")]
    BadWaypointCount { k: usize, samples: usize },
    #[error("dense sampling cumulative lengths are not monotonic")]
    NonMonotonicSampling,
    #[error("anchor index {0} outside guideline")]
    BadAnchor(usize),
    #[error("theta threshold must lie in (0, pi], got {0}")]
    BadThreshold(f64),
    #[error("orientation sequence has no intermediate targets")]
    EmptySequence,
    #[error("sequence start anchor {start} must precede end anchor {end}")]
    BadSequenceAnchors { start: usize, end: usize },
    #[error(transparent)]
    Geometry(#[from] GeometryError),
    #[error("unsupported guideline file version {0}")]
    UnsupportedVersion(u32),
    #[error("guideline file io: {0}")]
    Io(#[from] std::io::Error),
    #[error("guideline file parse: {0}")]
    Parse(#[from] serde_json::Error),
}

/// Coordinate frame of guideline waypoints.
///
/// There is exactly one: the robot base pose captured when stunt mode is
/// triggered. The tag exists so files and APIs state the convention
/// explicitly.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub enum FrameTag {
    #[default]
    #[serde(rename = "robot-local-at-trigger")]
    RobotLocalAtTrigger,
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct Waypoint {
    pub p: Vec3,
    /// Cumulative arc-length from the guideline start (m).
    pub d: f64,
}

/// The task specification: ordered waypoints with cumulative arc-lengths and
/// a reach margin.
#[derive(Debug, Clone)]
pub struct Guideline {
    pub waypoints: Vec<Waypoint>,
    /// Reach margin `d_margin` (m): a waypoint counts as reached when the base
    /// is strictly closer than this.
    pub margin: f64,
    pub frame: FrameTag,
}

impl Guideline {
    pub fn new(waypoints: Vec<Waypoint>, margin: f64) -> Result<Self, GuidelineError> {
        if waypoints.len() < 2 {
            return Err(GuidelineError::TooFewWaypoints(waypoints.len()));
        }
        if !(margin > 0.0) {
            return Err(GuidelineError::BadMargin(margin));
        }
        if waypoints[0].d < 0.0 {
            return Err(GuidelineError::NonMonotonicDistances(0));
        }
        for i in 1..waypoints.len() {
            if waypoints[i].d <= waypoints[i - 1].d {
                return Err(GuidelineError::NonMonotonicDistances(i));
            }
        }
        Ok(Guideline { waypoints, margin, frame: FrameTag::RobotLocalAtTrigger })
    }

    pub fn len(&self) -> usize {
        self.waypoints.len()
    }

    pub fn is_empty(&self) -> bool {
        self.waypoints.is_empty()
    }

    pub fn total_length(&self) -> f64 {
        self.waypoints.last().map(|w| w.d).unwrap_or(0.0)
    }
}

/// A target orientation attached to one waypoint, with a termination
/// threshold on the angular deviation.
#[derive(Debug, Clone, Copy)]
pub struct PositionKeyOrientation {
    pub anchor_index: usize,
    pub q: UnitQuaternion,
    pub theta_thres: f64,
}

impl PositionKeyOrientation {
    pub fn new(
        anchor_index: usize,
        q: UnitQuaternion,
        theta_thres: f64,
        gl: &Guideline,
    ) -> Result<Self, GuidelineError> {
        if anchor_index >= gl.len() {
            return Err(GuidelineError::BadAnchor(anchor_index));
        }
        if !(theta_thres > 0.0 && theta_thres <= std::f64::consts::PI) {
            return Err(GuidelineError::BadThreshold(theta_thres));
        }
        Ok(PositionKeyOrientation { anchor_index, q, theta_thres })
    }
}

/// Ordered orientations the base must pass through between two anchored
/// key-orientations, without ever letting the gap to the current target grow.
#[derive(Debug, Clone)]
pub struct OrientationSequence {
    pub start: PositionKeyOrientation,
    pub intermediates: Vec<UnitQuaternion>,
    pub end: PositionKeyOrientation,
    /// Target counts as reached below this angle (rad).
    pub capture_threshold: f64,
    /// Tolerated non-monotone jitter (rad).
    pub hysteresis: f64,
}

impl OrientationSequence {
    pub fn new(
        start: PositionKeyOrientation,
        intermediates: Vec<UnitQuaternion>,
        end: PositionKeyOrientation,
    ) -> Result<Self, GuidelineError> {
        if intermediates.is_empty() {
            return Err(GuidelineError::EmptySequence);
        }
        if start.anchor_index >= end.anchor_index {
            return Err(GuidelineError::BadSequenceAnchors {
                start: start.anchor_index,
                end: end.anchor_index,
            });
        }
        Ok(OrientationSequence {
            start,
            intermediates,
            end,
            capture_threshold: DEFAULT_CAPTURE_THRESHOLD,
            hysteresis: DEFAULT_HYSTERESIS,
        })
    }

    /// Number of targets to pass: the intermediates followed by the end
    /// orientation.
    pub fn target_count(&self) -> usize {
        self.intermediates.len() + 1
    }

    pub fn target(&self, idx: usize) -> UnitQuaternion {
        if idx < self.intermediates.len() {
            self.intermediates[idx]
        } else {
            self.end.q
        }
    }
}

/// Position-anchored and sequence-based key-orientations for one guideline.
#[derive(Debug, Clone, Default)]
pub struct KeyOrientationSet {
    pub position_keys: Vec<PositionKeyOrientation>,
    pub sequences: Vec<OrientationSequence>,
}

/// Currently tracked target of an activated orientation sequence.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ActiveSequence {
    pub seq_index: usize,
    pub target_index: usize,
}

/// Per-episode mutable progression state along one guideline.
#[derive(Debug, Clone)]
pub struct GuidelineProgress {
    /// Index of the active target waypoint.
    pub active_index: usize,
    /// Distance traveled by the base since the stunt trigger (m).
    pub traveled: f64,
    /// Distance to the active waypoint at the last reward evaluation.
    pub prev_dist_to_goal: f64,
    pub active_seq: Option<ActiveSequence>,
    /// Angular gap to the active sequence target at the previous step.
    pub prev_theta_diff: f64,
    pub finished: bool,
}

impl GuidelineProgress {
    pub fn new() -> Self {
        GuidelineProgress {
            active_index: 0,
            traveled: 0.0,
            prev_dist_to_goal: 0.0,
            active_seq: None,
            prev_theta_diff: 0.0,
            finished: false,
        }
    }
}

impl Default for GuidelineProgress {
    fn default() -> Self {
        Self::new()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ProgressEvent {
    Advanced(usize),
    Finished,
    NoChange,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TerminationVerdict {
    Continue,
    Terminate,
}

/// Resamples a dense curve into `k` waypoints at approximately equal
/// arc-length spacing. The first and last dense samples are always included
/// and each waypoint carries its cumulative length as `d`.
pub fn build_guideline(
    samples: &DenseSampling,
    k: usize,
    margin: f64,
) -> Result<Guideline, GuidelineError> {
    let n = samples.len();
    if k < 2 || k > n {
        return Err(GuidelineError::BadWaypointCount { k, samples: n });
    }
    for w in samples.cum_lengths.windows(2) {
        if w[1] < w[0] {
            return Err(GuidelineError::NonMonotonicSampling);
        }
    }
    let total = samples.total_length();
    let mut waypoints = Vec::with_capacity(k);
    let mut prev_idx: Option<usize> = None;
    for j in 0..k {
        let idx = if j == 0 {
            0
        } else if j == k - 1 {
            n - 1
        } else {
            let target = total * j as f64 / (k - 1) as f64;
            // Closest sample by arc-length, forced past the previous pick.
            let lo = samples.cum_lengths.partition_point(|&d| d < target);
            let cand = if lo == 0 {
                0
            } else if lo >= n {
                n - 1
            } else if (samples.cum_lengths[lo] - target) <= (target - samples.cum_lengths[lo - 1]) {
                lo
            } else {
                lo - 1
            };
            cand.max(prev_idx.map_or(0, |p| p + 1)).min(n - 1)
        };
        // Strict d ordering: skip forward over zero-length runs.
        let mut idx = idx;
        if let Some(prev) = prev_idx {
            while idx < n && samples.cum_lengths[idx] <= samples.cum_lengths[prev] {
                idx += 1;
            }
            if idx >= n {
                return Err(GuidelineError::NonMonotonicSampling);
            }
        }
        prev_idx = Some(idx);
        waypoints.push(Waypoint { p: samples.points[idx], d: samples.cum_lengths[idx] });
    }
    Guideline::new(waypoints, margin)
}

/// Tracking reward: the negative change in distance to the active waypoint.
///
/// Positive whenever the base moved closer to the target over the step.
/// A finished progression yields zero reward.
pub fn line_reward(
    progress: &mut GuidelineProgress,
    x_prev: Vec3,
    x_now: Vec3,
    gl: &Guideline,
) -> f64 {
    if progress.finished {
        return 0.0;
    }
    let goal = gl.waypoints[progress.active_index].p;
    let now = x_now.distance(goal);
    progress.prev_dist_to_goal = now;
    -(now - x_prev.distance(goal))
}

/// Accumulates traveled distance and advances the active waypoint through
/// every waypoint currently inside the reach margin.
pub fn advance(
    progress: &mut GuidelineProgress,
    x_now: Vec3,
    step_displacement: f64,
    gl: &Guideline,
) -> ProgressEvent {
    debug_assert!(step_displacement >= 0.0);
    if progress.finished {
        return ProgressEvent::NoChange;
    }
    progress.traveled += step_displacement;
    let mut count = 0;
    loop {
        let wp = &gl.waypoints[progress.active_index];
        if x_now.distance(wp.p) < gl.margin {
            if progress.active_index + 1 == gl.len() {
                progress.finished = true;
                return ProgressEvent::Finished;
            }
            progress.active_index += 1;
            count += 1;
        } else {
            break;
        }
    }
    if count > 0 {
        ProgressEvent::Advanced(count)
    } else {
        ProgressEvent::NoChange
    }
}

/// Traveled-distance termination: fires when the base has already covered the
/// arc-length budget of the active waypoint without reaching it.
pub fn check_termination(
    progress: &GuidelineProgress,
    x_now: Vec3,
    gl: &Guideline,
) -> TerminationVerdict {
    if progress.finished {
        return TerminationVerdict::Continue;
    }
    let wp = &gl.waypoints[progress.active_index];
    if progress.traveled > wp.d && x_now.distance(wp.p) >= gl.margin {
        TerminationVerdict::Terminate
    } else {
        TerminationVerdict::Continue
    }
}

/// Position-based key-orientation reward.
///
/// The key is active while the base is inside the margin ball of its anchor
/// waypoint; outside the ball the reward is zero and no verdict can fire.
/// While active, the reward is `exp(−θ_diff)` and the episode terminates if
/// `θ_diff` exceeds the key's threshold.
pub fn pos_key_reward(
    q_now: UnitQuaternion,
    key: &PositionKeyOrientation,
    x_now: Vec3,
    gl: &Guideline,
) -> Result<(f64, TerminationVerdict), GuidelineError> {
    if key.anchor_index >= gl.len() {
        return Err(GuidelineError::BadAnchor(key.anchor_index));
    }
    let anchor = gl.waypoints[key.anchor_index].p;
    if x_now.distance(anchor) >= gl.margin {
        return Ok((0.0, TerminationVerdict::Continue));
    }
    let theta = quat_angle(q_now, key.q)?;
    let verdict = if theta > key.theta_thres {
        TerminationVerdict::Terminate
    } else {
        TerminationVerdict::Continue
    };
    Ok(((-theta).exp(), verdict))
}

/// Outcome of one sequence-based key-orientation step.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SequenceStep {
    pub reward: f64,
    pub verdict: TerminationVerdict,
    /// Number of targets captured this step.
    pub targets_advanced: usize,
    /// True once the final target (the end orientation) has been captured.
    pub completed: bool,
}

/// Sequence-based key-orientation reward: angular progress toward the
/// current target, with monotonicity termination and target capture.
///
/// `progress.active_seq` must reference `seq`; use
/// [`update_sequence_activation`] to manage activation from waypoint
/// progression.
pub fn seq_key_reward(
    q_now: UnitQuaternion,
    q_prev: UnitQuaternion,
    seq: &OrientationSequence,
    progress: &mut GuidelineProgress,
) -> Result<SequenceStep, GuidelineError> {
    if seq.intermediates.is_empty() {
        return Err(GuidelineError::EmptySequence);
    }
    let Some(active) = progress.active_seq else {
        return Ok(SequenceStep {
            reward: 0.0,
            verdict: TerminationVerdict::Continue,
            targets_advanced: 0,
            completed: false,
        });
    };
    let target = seq.target(active.target_index);
    let theta_now = quat_angle(q_now, target)?;
    // prev_theta_diff is kept against the same target across steps; on the
    // first step after activation or a capture it was re-seeded.
    let theta_prev = if progress.prev_theta_diff.is_nan() {
        quat_angle(q_prev, target)?
    } else {
        progress.prev_theta_diff
    };
    let reward = -(theta_now - theta_prev);
    let mut verdict = TerminationVerdict::Continue;
    let mut idx = active.target_index;
    let mut theta_next = theta_now;
    let mut advanced = 0;
    let mut completed = false;
    if theta_now < seq.capture_threshold {
        loop {
            if idx + 1 >= seq.target_count() {
                completed = true;
                break;
            }
            idx += 1;
            advanced += 1;
            theta_next = quat_angle(q_now, seq.target(idx))?;
            if theta_next >= seq.capture_threshold {
                break;
            }
        }
    } else if theta_now > theta_prev + seq.hysteresis {
        verdict = TerminationVerdict::Terminate;
    }
    if completed {
        progress.active_seq = None;
        progress.prev_theta_diff = f64::NAN;
    } else {
        progress.active_seq = Some(ActiveSequence { seq_index: active.seq_index, target_index: idx });
        progress.prev_theta_diff = theta_next;
    }
    Ok(SequenceStep { reward, verdict, targets_advanced: advanced, completed })
}

/// Activates or deactivates sequences based on waypoint progression: a
/// sequence runs from the step its start anchor is passed until either its
/// targets are exhausted or its end anchor is reached.
pub fn update_sequence_activation(progress: &mut GuidelineProgress, keys: &KeyOrientationSet) {
    if let Some(active) = progress.active_seq {
        let seq = &keys.sequences[active.seq_index];
        let end_passed = progress.active_index > seq.end.anchor_index
            || (progress.finished && seq.end.anchor_index == progress.active_index);
        if end_passed {
            progress.active_seq = None;
            progress.prev_theta_diff = f64::NAN;
        }
        return;
    }
    for (i, seq) in keys.sequences.iter().enumerate() {
        let started = progress.active_index > seq.start.anchor_index;
        let not_over = progress.active_index <= seq.end.anchor_index && !progress.finished;
        if started && not_over {
            progress.active_seq = Some(ActiveSequence { seq_index: i, target_index: 0 });
            progress.prev_theta_diff = f64::NAN;
            return;
        }
    }
}

// ---------------------------------------------------------------------------
// Guideline file format (schema version 1, JSON).
// ---------------------------------------------------------------------------

pub const GUIDELINE_SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Clone, Serialize, Deserialize)]
struct WaypointRecord {
    p: [f64; 3],
    d: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(tag = "type")]
enum KeyOrientationRecord {
    #[serde(rename = "position")]
    Position { anchor: usize, q: [f64; 4], theta_thres: f64 },
    #[serde(rename = "sequence")]
    Sequence {
        anchors: [usize; 2],
        /// Start orientation, intermediates, end orientation — in order.
        quaternions: Vec<[f64; 4]>,
        theta_thres: f64,
        capture_threshold: f64,
        hysteresis: f64,
    },
}

/// On-disk guideline representation. Round-trips byte-identically through
/// [`GuidelineFile::to_json`] / [`GuidelineFile::from_json`].
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct GuidelineFile {
    version: u32,
    pub name: String,
    waypoints: Vec<WaypointRecord>,
    margin: f64,
    key_orientations: Vec<KeyOrientationRecord>,
}

fn quat_rec(q: UnitQuaternion) -> [f64; 4] {
    [q.w, q.x, q.y, q.z]
}

fn quat_from_rec(r: [f64; 4]) -> Result<UnitQuaternion, GuidelineError> {
    Ok(UnitQuaternion::new_normalized(r[0], r[1], r[2], r[3])?)
}

impl GuidelineFile {
    pub fn from_parts(name: &str, gl: &Guideline, keys: &KeyOrientationSet) -> Self {
        let waypoints = gl
            .waypoints
            .iter()
            .map(|w| WaypointRecord { p: [w.p.x, w.p.y, w.p.z], d: w.d })
            .collect();
        let mut key_orientations = Vec::new();
        for k in &keys.position_keys {
            key_orientations.push(KeyOrientationRecord::Position {
                anchor: k.anchor_index,
                q: quat_rec(k.q),
                theta_thres: k.theta_thres,
            });
        }
        for s in &keys.sequences {
            let mut quaternions = vec![quat_rec(s.start.q)];
            quaternions.extend(s.intermediates.iter().copied().map(quat_rec));
            quaternions.push(quat_rec(s.end.q));
            key_orientations.push(KeyOrientationRecord::Sequence {
                anchors: [s.start.anchor_index, s.end.anchor_index],
                quaternions,
                theta_thres: s.start.theta_thres,
                capture_threshold: s.capture_threshold,
                hysteresis: s.hysteresis,
            });
        }
        GuidelineFile {
            version: GUIDELINE_SCHEMA_VERSION,
            name: name.to_string(),
            waypoints,
            margin: gl.margin,
            key_orientations,
        }
    }

    pub fn into_parts(&self) -> Result<(Guideline, KeyOrientationSet), GuidelineError> {
        if self.version != GUIDELINE_SCHEMA_VERSION {
            return Err(GuidelineError::UnsupportedVersion(self.version));
        }
        let waypoints = self
            .waypoints
            .iter()
            .map(|w| Waypoint { p: Vec3::new(w.p[0], w.p[1], w.p[2]), d: w.d })
            .collect();
        let gl = Guideline::new(waypoints, self.margin)?;
        let mut keys = KeyOrientationSet::default();
        for rec in &self.key_orientations {
            match rec {
                KeyOrientationRecord::Position { anchor, q, theta_thres } => {
                    keys.position_keys.push(PositionKeyOrientation::new(
                        *anchor,
                        quat_from_rec(*q)?,
                        *theta_thres,
                        &gl,
                    )?);
                }
                KeyOrientationRecord::Sequence {
                    anchors,
                    quaternions,
                    theta_thres,
                    capture_threshold,
                    hysteresis,
                } => {
                    if quaternions.len() < 3 {
                        return Err(GuidelineError::EmptySequence);
                    }
                    let start = PositionKeyOrientation::new(
                        anchors[0],
                        quat_from_rec(quaternions[0])?,
                        *theta_thres,
                        &gl,
                    )?;
                    let end = PositionKeyOrientation::new(
                        anchors[1],
                        quat_from_rec(*quaternions.last().unwrap())?,
                        *theta_thres,
                        &gl,
                    )?;
                    let intermediates = quaternions[1..quaternions.len() - 1]
                        .iter()
                        .map(|r| quat_from_rec(*r))
                        .collect::<Result<Vec<_>, _>>()?;
                    let mut seq = OrientationSequence::new(start, intermediates, end)?;
                    seq.capture_threshold = *capture_threshold;
                    seq.hysteresis = *hysteresis;
                    keys.sequences.push(seq);
                }
            }
        }
        Ok((gl, keys))
    }

    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("guideline file serializes");
        s.push('\n');
        s
    }

    pub fn from_json(text: &str) -> Result<Self, GuidelineError> {
        Ok(serde_json::from_str(text)?)
    }

    pub fn save(&self, path: &std::path::Path) -> Result<(), GuidelineError> {
        std::fs::write(path, self.to_json())?;
        Ok(())
    }

    pub fn load(path: &std::path::Path) -> Result<Self, GuidelineError> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::{quat_from_pitch, sample_dense, HermiteSegment};
    use approx::assert_relative_eq;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn straight_meter(n: usize) -> DenseSampling {
        let s = HermiteSegment::line(Vec3::ZERO, Vec3::new(1.0, 0.0, 0.0));
        sample_dense(&[s], n).unwrap()
    }

    fn simple_guideline() -> Guideline {
        build_guideline(&straight_meter(1000), 5, 0.3).unwrap()
    }

    #[test]
    fn two_waypoint_line() {
        let gl = build_guideline(&straight_meter(1000), 2, 0.3).unwrap();
        assert_eq!(gl.len(), 2);
        assert_eq!(gl.waypoints[0].d, 0.0);
        assert_relative_eq!(gl.waypoints[1].d, 1.0, epsilon = 1e-6);
        assert_relative_eq!(gl.waypoints[1].p.x, 1.0, epsilon = 1e-6);
    }

    #[test]
    fn five_waypoints_equal_spacing() {
        let gl = simple_guideline();
        for (i, expect) in [0.0, 0.25, 0.5, 0.75, 1.0].iter().enumerate() {
            assert!((gl.waypoints[i].d - expect).abs() < 2e-3, "d[{i}] = {}", gl.waypoints[i].d);
        }
    }

    #[test]
    fn strict_ordering_enforced() {
        let wps = vec![
            Waypoint { p: Vec3::ZERO, d: 0.0 },
            Waypoint { p: Vec3::new(1.0, 0.0, 0.0), d: 1.0 },
            Waypoint { p: Vec3::new(1.0, 0.0, 0.0), d: 1.0 },
        ];
        assert!(matches!(Guideline::new(wps, 0.3), Err(GuidelineError::NonMonotonicDistances(2))));
        assert!(matches!(
            Guideline::new(vec![Waypoint { p: Vec3::ZERO, d: 0.0 }], 0.3),
            Err(GuidelineError::TooFewWaypoints(1))
        ));
    }

    #[test]
    fn line_reward_signs() {
        let gl = simple_guideline();
        let mut pr = GuidelineProgress::new();
        pr.active_index = 4; // goal at (1, 0, 0)
        let goal = gl.waypoints[4].p;
        let at = |d: f64| Vec3::new(goal.x - d, 0.0, 0.0);
        assert_relative_eq!(line_reward(&mut pr, at(1.0), at(0.8), &gl), 0.2, epsilon = 1e-12);
        assert_relative_eq!(line_reward(&mut pr, at(0.5), at(0.5), &gl), 0.0, epsilon = 1e-12);
        assert_relative_eq!(line_reward(&mut pr, at(0.8), at(1.0), &gl), -0.2, epsilon = 1e-12);
        pr.finished = true;
        assert_eq!(line_reward(&mut pr, at(1.0), at(0.0), &gl), 0.0);
    }

    #[test]
    fn advance_and_margin_edge() {
        // Waypoints 0.25 apart, margin 0.2: at most one waypoint per ball.
        let gl = build_guideline(&straight_meter(1000), 5, 0.2).unwrap();
        let mut pr = GuidelineProgress::new();
        // Start position: inside margin of waypoint 0 only.
        let ev = advance(&mut pr, Vec3::ZERO, 0.0, &gl);
        assert_eq!(ev, ProgressEvent::Advanced(1));
        assert_eq!(pr.active_index, 1);
        // Exactly at margin distance from waypoint 1: strict inequality, no advance.
        let wp1 = gl.waypoints[1].p;
        let at_margin = Vec3::new(wp1.x - gl.margin, 0.0, 0.0);
        assert_eq!(advance(&mut pr, at_margin, 0.1, &gl), ProgressEvent::NoChange);
        assert_relative_eq!(pr.traveled, 0.1);
        // Within margin: advance.
        let inside = Vec3::new(wp1.x - 0.19, 0.0, 0.0);
        assert_eq!(advance(&mut pr, inside, 0.1, &gl), ProgressEvent::Advanced(1));
    }

    #[test]
    fn multiple_waypoints_in_one_margin_ball() {
        // Waypoints 0.1 apart, margin 0.35 swallows several at once.
        let wps: Vec<Waypoint> = (0..6)
            .map(|i| Waypoint { p: Vec3::new(0.1 * i as f64, 0.0, 0.0), d: 0.1 * i as f64 })
            .collect();
        let gl = Guideline::new(wps, 0.35).unwrap();
        let mut pr = GuidelineProgress::new();
        let ev = advance(&mut pr, Vec3::new(0.05, 0.0, 0.0), 0.05, &gl);
        assert_eq!(ev, ProgressEvent::Advanced(4));
        assert_eq!(pr.active_index, 4);
    }

    #[test]
    fn finishing_is_absorbing() {
        let gl = build_guideline(&straight_meter(100), 2, 0.3).unwrap();
        let mut pr = GuidelineProgress::new();
        advance(&mut pr, Vec3::ZERO, 0.0, &gl);
        let ev = advance(&mut pr, Vec3::new(0.95, 0.0, 0.0), 1.0, &gl);
        assert_eq!(ev, ProgressEvent::Finished);
        assert!(pr.finished);
        assert_eq!(advance(&mut pr, Vec3::new(2.0, 0.0, 0.0), 1.0, &gl), ProgressEvent::NoChange);
        assert_eq!(check_termination(&pr, Vec3::new(9.0, 0.0, 0.0), &gl), TerminationVerdict::Continue);
    }

    #[test]
    fn traveled_distance_termination() {
        // Mirror of the mini-hop scenario: active waypoint with d = 1.2 m.
        let wps = vec![
            Waypoint { p: Vec3::ZERO, d: 0.0 },
            Waypoint { p: Vec3::new(0.6, 0.0, 0.0), d: 0.6 },
            Waypoint { p: Vec3::new(1.2, 0.0, 0.0), d: 1.2 },
            Waypoint { p: Vec3::new(1.8, 0.0, 0.0), d: 1.8 },
        ];
        let gl = Guideline::new(wps, 0.3).unwrap();
        let mut pr = GuidelineProgress::new();
        pr.active_index = 2;
        pr.traveled = 1.2;
        // Budget not exceeded yet (strict inequality).
        assert_eq!(
            check_termination(&pr, Vec3::new(0.4, 0.0, 0.0), &gl),
            TerminationVerdict::Continue
        );
        pr.traveled = 1.25;
        // Too far from p_3 with budget exceeded: terminate.
        let far = Vec3::new(1.2 - 0.5, 0.0, 0.0);
        assert_eq!(check_termination(&pr, far, &gl), TerminationVerdict::Terminate);
        // Inside the margin the reach test supersedes: advance fires first.
        let near = Vec3::new(1.2 - 0.2, 0.0, 0.0);
        assert_eq!(advance(&mut pr, near, 0.0, &gl), ProgressEvent::Advanced(1));
        assert_eq!(check_termination(&pr, near, &gl), TerminationVerdict::Continue);
    }

    #[test]
    fn pos_key_reward_inside_and_outside_ball() {
        let gl = simple_guideline();
        let key = PositionKeyOrientation::new(2, quat_from_pitch(0.3), 1.0, &gl).unwrap();
        let anchor = gl.waypoints[2].p;
        // Same orientation at the anchor: reward 1, continue.
        let (r, v) = pos_key_reward(quat_from_pitch(0.3), &key, anchor, &gl).unwrap();
        assert_relative_eq!(r, 1.0, epsilon = 1e-12);
        assert_eq!(v, TerminationVerdict::Continue);
        // 90 degrees off with threshold 1 rad: terminate, reward exp(-pi/2).
        let off = quat_from_pitch(0.3 + std::f64::consts::FRAC_PI_2);
        let (r, v) = pos_key_reward(off, &key, anchor, &gl).unwrap();
        assert_relative_eq!(r, (-std::f64::consts::FRAC_PI_2).exp(), epsilon = 1e-12);
        assert_eq!(v, TerminationVerdict::Terminate);
        // Outside the margin ball the key is inactive.
        let far = Vec3::new(anchor.x + 1.0, 0.0, 0.0);
        let (r, v) = pos_key_reward(off, &key, far, &gl).unwrap();
        assert_eq!(r, 0.0);
        assert_eq!(v, TerminationVerdict::Continue);
    }

    fn backflip_sequence(gl: &Guideline) -> OrientationSequence {
        let start = PositionKeyOrientation::new(0, quat_from_pitch(0.0), 1.0, gl).unwrap();
        let end =
            PositionKeyOrientation::new(4, quat_from_pitch(-2.0 * std::f64::consts::PI), 1.0, gl)
                .unwrap();
        OrientationSequence::new(
            start,
            vec![
                quat_from_pitch(-90f64.to_radians()),
                quat_from_pitch(-180f64.to_radians()),
                quat_from_pitch(-270f64.to_radians()),
            ],
            end,
        )
        .unwrap()
    }

    #[test]
    fn sequence_reward_and_capture() {
        let gl = simple_guideline();
        let seq = backflip_sequence(&gl);
        let keys =
            KeyOrientationSet { position_keys: vec![], sequences: vec![seq.clone()] };
        let mut pr = GuidelineProgress::new();
        pr.active_index = 1;
        update_sequence_activation(&mut pr, &keys);
        assert_eq!(pr.active_seq, Some(ActiveSequence { seq_index: 0, target_index: 0 }));

        // Sweep pitch from 0 to -2pi; the sequence must capture all four
        // targets in order and never terminate.
        let mut q_prev = quat_from_pitch(0.0);
        let mut captured = 0;
        let mut completed = false;
        let steps = 200;
        for i in 1..=steps {
            let pitch = -2.0 * std::f64::consts::PI * i as f64 / steps as f64;
            let q_now = quat_from_pitch(pitch);
            let out = seq_key_reward(q_now, q_prev, &seq, &mut pr).unwrap();
            assert_eq!(out.verdict, TerminationVerdict::Continue, "step {i}");
            captured += out.targets_advanced;
            if out.completed {
                completed = true;
                break;
            }
            q_prev = q_now;
        }
        assert!(completed);
        assert_eq!(captured, 3);
        assert!(pr.active_seq.is_none());
    }

    #[test]
    fn sequence_reward_values_and_monotonicity_termination() {
        let gl = simple_guideline();
        let seq = backflip_sequence(&gl);
        let mut pr = GuidelineProgress::new();
        pr.active_seq = Some(ActiveSequence { seq_index: 0, target_index: 0 });
        pr.prev_theta_diff = f64::NAN;

        // Theta shrinking from 1.0 to 0.9 rad toward the -90 deg target.
        let target_pitch = -90f64.to_radians();
        let q_prev = quat_from_pitch(target_pitch + 1.0);
        let q_now = quat_from_pitch(target_pitch + 0.9);
        let out = seq_key_reward(q_now, q_prev, &seq, &mut pr).unwrap();
        assert_relative_eq!(out.reward, 0.1, epsilon = 1e-9);
        assert_eq!(out.verdict, TerminationVerdict::Continue);

        // No motion: zero reward, within hysteresis.
        let out = seq_key_reward(q_now, q_now, &seq, &mut pr).unwrap();
        assert_relative_eq!(out.reward, 0.0, epsilon = 1e-12);
        assert_eq!(out.verdict, TerminationVerdict::Continue);

        // Gap grows past the hysteresis: terminate.
        let q_bad = quat_from_pitch(target_pitch + 1.2);
        let out = seq_key_reward(q_bad, q_now, &seq, &mut pr).unwrap();
        assert!(out.reward < 0.0);
        assert_eq!(out.verdict, TerminationVerdict::Terminate);
    }

    #[test]
    fn file_round_trip_is_byte_identical() {
        let gl = simple_guideline();
        let mut keys = KeyOrientationSet::default();
        keys.position_keys.push(
            PositionKeyOrientation::new(3, quat_from_pitch(17f64.to_radians()), 1.0, &gl).unwrap(),
        );
        keys.sequences.push(backflip_sequence(&gl));
        let file = GuidelineFile::from_parts("test", &gl, &keys);
        let json = file.to_json();
        let reread = GuidelineFile::from_json(&json).unwrap();
        assert_eq!(json, reread.to_json());
        let (gl2, keys2) = reread.into_parts().unwrap();
        assert_eq!(gl2.len(), gl.len());
        assert_eq!(keys2.position_keys.len(), 1);
        assert_eq!(keys2.sequences.len(), 1);
        assert_eq!(keys2.sequences[0].intermediates.len(), 3);
    }

    #[test]
    fn file_version_guard() {
        let gl = simple_guideline();
        let mut file = GuidelineFile::from_parts("v", &gl, &KeyOrientationSet::default());
        file.version = 99;
        assert!(matches!(file.into_parts(), Err(GuidelineError::UnsupportedVersion(99))));
    }

    #[test]
    fn telescoping_line_reward() {
        let gl = simple_guideline();
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for _ in 0..50 {
            let mut pr = GuidelineProgress::new();
            pr.active_index = 4;
            let goal = gl.waypoints[4].p;
            let mut pts = vec![Vec3::new(
                rng.random_range(-2.0..2.0),
                rng.random_range(-2.0..2.0),
                rng.random_range(-2.0..2.0),
            )];
            for _ in 0..100 {
                let last = *pts.last().unwrap();
                pts.push(
                    last + Vec3::new(
                        rng.random_range(-0.05..0.05),
                        rng.random_range(-0.05..0.05),
                        rng.random_range(-0.05..0.05),
                    ),
                );
            }
            let mut total = 0.0;
            for w in pts.windows(2) {
                total += line_reward(&mut pr, w[0], w[1], &gl);
            }
            let expect = pts[0].distance(goal) - pts.last().unwrap().distance(goal);
            assert!((total - expect).abs() < 1e-9);
        }
    }

    proptest! {
        #[test]
        fn traveled_is_nondecreasing(steps in proptest::collection::vec(0.0..0.2f64, 1..80)) {
            let gl = simple_guideline();
            let mut pr = GuidelineProgress::new();
            let mut last = 0.0;
            let mut x = Vec3::new(-1.0, 0.0, 0.0);
            for (i, s) in steps.iter().enumerate() {
                x = x + Vec3::new(*s, 0.0, 0.0);
                advance(&mut pr, x, *s, &gl);
                if pr.finished {
                    break;
                }
                prop_assert!(pr.traveled >= last, "step {i}");
                last = pr.traveled;
            }
        }

        #[test]
        fn termination_never_fires_under_budget(
            seed in 0u64..500,
        ) {
            let gl = simple_guideline();
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let mut pr = GuidelineProgress::new();
            let mut x = Vec3::ZERO;
            for _ in 0..200 {
                let dx = Vec3::new(
                    rng.random_range(-0.03..0.05),
                    0.0,
                    rng.random_range(-0.02..0.02),
                );
                x = x + dx;
                advance(&mut pr, x, dx.norm(), &gl);
                if pr.finished {
                    break;
                }
                let verdict = check_termination(&pr, x, &gl);
                if pr.traveled <= gl.waypoints[pr.active_index].d {
                    prop_assert_eq!(verdict, TerminationVerdict::Continue);
                }
            }
        }

        #[test]
        fn pos_key_reward_bounded(pitch in -3.0..3.0f64, offset in -0.29..0.29f64) {
            let gl = simple_guideline();
            let key = PositionKeyOrientation::new(2, quat_from_pitch(0.0), 3.0, &gl).unwrap();
            let x = Vec3::new(gl.waypoints[2].p.x + offset, 0.0, 0.0);
            let (r, _) = pos_key_reward(quat_from_pitch(pitch), &key, x, &gl).unwrap();
            prop_assert!(r > 0.0 && r <= 1.0);
            if pitch == 0.0 {
                prop_assert!((r - 1.0).abs() < 1e-12);
            }
        }
    }
}

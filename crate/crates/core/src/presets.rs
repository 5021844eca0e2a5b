//! Shipped stunt presets: guideline geometry at the scales the planar plant
//! supports, plus the training configuration used by the hop benchmark.
//!
//! Hop arches are exact parabolas expressed as single Hermite segments
//! (tangents `(span, 0, ±4·apex)`), joined C0 to straight run-up and exit
//! segments. Yaw-plane maneuvers (three-point turn, drift turn) cannot exist
//! in a planar plant and are exposed only as named stubs.

use crate::dynamics::PlanarBikeParams;
use crate::env::EnvConfig;
use crate::geometry::{quat_from_pitch, sample_dense, DenseSampling, HermiteSegment, Vec3};
use crate::guideline::{
    build_guideline, Guideline, GuidelineError, KeyOrientationSet, PositionKeyOrientation,
};
use crate::rl::{PPOConfig, TrainConfig};
use crate::trajopt::{build_backflip_problem, TrajOptProblem};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum PresetError {
    #[error("preset '{0}' is a yaw-plane maneuver and is not supported by the planar plant")]
    UnsupportedInPlanarPlant(&'static str),
    #[error("unknown preset '{0}'")]
    Unknown(String),
    #[error(transparent)]
    Guideline(#[from] GuidelineError),
    #[error(transparent)]
    Geometry(#[from] crate::geometry::GeometryError),
}

/// The five stunts plus the toy benchmark line.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StuntPreset {
    MiniHop,
    /// Mini-hop without the landing key-orientation.
    MiniHopNoKey,
    LargeHop,
    Backflip,
    ThreePointTurn,
    DriftTurn,
    /// Straight driving line used by training smoke tests.
    Line,
}

impl StuntPreset {
    pub fn parse(name: &str) -> Result<Self, PresetError> {
        match name {
            "mini-hop" => Ok(StuntPreset::MiniHop),
            "mini-hop-nokey" => Ok(StuntPreset::MiniHopNoKey),
            "large-hop" => Ok(StuntPreset::LargeHop),
            "backflip" => Ok(StuntPreset::Backflip),
            "three-point-turn" => Ok(StuntPreset::ThreePointTurn),
            "drift-turn" => Ok(StuntPreset::DriftTurn),
            "line" => Ok(StuntPreset::Line),
            other => Err(PresetError::Unknown(other.to_string())),
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            StuntPreset::MiniHop => "mini-hop",
            StuntPreset::MiniHopNoKey => "mini-hop-nokey",
            StuntPreset::LargeHop => "large-hop",
            StuntPreset::Backflip => "backflip",
            StuntPreset::ThreePointTurn => "three-point-turn",
            StuntPreset::DriftTurn => "drift-turn",
            StuntPreset::Line => "line",
        }
    }

    pub fn all_names() -> &'static [&'static str] {
        &[
            "mini-hop",
            "mini-hop-nokey",
            "large-hop",
            "backflip",
            "three-point-turn",
            "drift-turn",
            "line",
        ]
    }
}

/// Landing pitch encouraged by the hop presets (degrees).
pub const LANDING_PITCH_DEG: f64 = 17.0;
/// Termination threshold of the landing key (rad): tight enough that the
/// pitch target actually binds at touchdown.
pub const LANDING_THETA_THRES: f64 = 0.26;
/// Reach margin shared by all stunts (m).
pub const STUNT_MARGIN: f64 = 0.3;

/// Hop curve: straight run-up, parabolic arch, straight exit, tuned so the
/// total arc length hits `total_length` and waypoints land on round
/// distances.
fn hop_chain(run_up: f64, span: f64, apex: f64, total_length: f64) -> Vec<HermiteSegment> {
    let start = Vec3::ZERO;
    let launch = Vec3::new(run_up, 0.0, 0.0);
    let touchdown = Vec3::new(run_up + span, 0.0, 0.0);
    let arch = HermiteSegment::new(
        launch,
        touchdown,
        Vec3::new(span, 0.0, 4.0 * apex),
        Vec3::new(span, 0.0, -4.0 * apex),
    );
    // Measure the run-up + arch, then extend the exit to hit the total.
    let partial = sample_dense(&[HermiteSegment::line(start, launch), arch], 2000)
        .expect("hop chain samples");
    let exit_len = (total_length - partial.total_length()).max(0.3);
    let exit_end = Vec3::new(run_up + span + exit_len, 0.0, 0.0);
    vec![
        HermiteSegment::line(start, launch),
        arch,
        HermiteSegment::line(touchdown, exit_end),
    ]
}

/// A fully assembled guideline task.
pub struct PresetGuideline {
    pub name: &'static str,
    pub guideline: Guideline,
    pub keys: KeyOrientationSet,
    pub dense: DenseSampling,
}

/// Builds the guideline for a preset, or reports why it cannot exist in the
/// planar plant. The backflip preset is generated through trajectory
/// optimization instead; see [`backflip_problem`].
pub fn build_preset(preset: StuntPreset) -> Result<PresetGuideline, PresetError> {
    match preset {
        StuntPreset::MiniHop | StuntPreset::MiniHopNoKey => {
            // Hop of about 32 cm height over about 50 cm, with a 1.5 m
            // run-up; seven waypoints put d_3 = 1.2 m on the approach.
            let chain = hop_chain(1.5, 0.5, 0.32, 3.6);
            let dense = sample_dense(&chain, 1000)?;
            let guideline = build_guideline(&dense, 7, STUNT_MARGIN)?;
            let mut keys = KeyOrientationSet::default();
            if preset == StuntPreset::MiniHop {
                let landing = landing_waypoint(&guideline, 1.5 + 0.5);
                keys.position_keys.push(PositionKeyOrientation::new(
                    landing,
                    quat_from_pitch(LANDING_PITCH_DEG.to_radians()),
                    LANDING_THETA_THRES,
                    &guideline,
                )?);
            }
            Ok(PresetGuideline { name: preset.name(), guideline, keys, dense })
        }
        StuntPreset::LargeHop => {
            // About 56 cm height over 80 cm.
            let chain = hop_chain(1.5, 0.8, 0.56, 4.5);
            let dense = sample_dense(&chain, 1000)?;
            let guideline = build_guideline(&dense, 9, STUNT_MARGIN)?;
            let mut keys = KeyOrientationSet::default();
            let landing = landing_waypoint(&guideline, 1.5 + 0.8);
            keys.position_keys.push(PositionKeyOrientation::new(
                landing,
                quat_from_pitch(LANDING_PITCH_DEG.to_radians()),
                LANDING_THETA_THRES,
                &guideline,
            )?);
            Ok(PresetGuideline { name: preset.name(), guideline, keys, dense })
        }
        StuntPreset::Line => {
            let chain = [HermiteSegment::line(Vec3::ZERO, Vec3::new(2.0, 0.0, 0.0))];
            let dense = sample_dense(&chain, 1000)?;
            let guideline = build_guideline(&dense, 4, STUNT_MARGIN)?;
            Ok(PresetGuideline {
                name: preset.name(),
                guideline,
                keys: KeyOrientationSet::default(),
                dense,
            })
        }
        StuntPreset::Backflip => Err(PresetError::Unknown(
            "backflip guidelines come from trajectory optimization; use the trajopt command"
                .to_string(),
        )),
        StuntPreset::ThreePointTurn => {
            Err(PresetError::UnsupportedInPlanarPlant("three-point-turn"))
        }
        StuntPreset::DriftTurn => Err(PresetError::UnsupportedInPlanarPlant("drift-turn")),
    }
}

/// Waypoint closest to the hop touchdown arc-length.
fn landing_waypoint(gl: &Guideline, approx_x: f64) -> usize {
    let mut best = gl.len() - 1;
    let mut best_d = f64::INFINITY;
    for (i, w) in gl.waypoints.iter().enumerate() {
        let d = (w.p.x - approx_x).abs() + w.p.z.abs();
        if d < best_d {
            best_d = d;
            best = i;
        }
    }
    best
}

/// The backflip trajectory-optimization problem at default scales.
pub fn backflip_problem(params: &PlanarBikeParams) -> TrajOptProblem {
    build_backflip_problem(params, 0.8)
}

/// Environment configuration for a preset guideline.
pub fn env_config(preset: &PresetGuideline) -> EnvConfig {
    EnvConfig::new(preset.guideline.clone(), preset.keys.clone())
}

/// Training configuration used by the hop benchmark: small network, sixteen
/// environments, evaluation-gated early stop.
pub fn benchmark_train_config(seed: u64, total_steps: usize) -> TrainConfig {
    TrainConfig {
        ppo: PPOConfig {
            gamma: 0.995,
            gae_lambda: 0.95,
            clip_ratio: 0.2,
            learning_rate: 3e-4,
            epochs: 4,
            minibatch_size: 2048,
            horizon: 256,
            n_envs: 16,
            entropy_coef: 0.002,
            value_coef: 0.5,
            grad_clip: 0.5,
            total_steps,
            seed,
            lr_final_fraction: 0.15,
        },
        hidden: vec![128, 64],
        eval_every_iters: 25,
        eval_episodes: 20,
        success_stop: Some(0.92),
        checkpoint_every_iters: 0,
        out_dir: None,
    }
}

//! The MDP: observation assembly, reward aggregation, driving/stunt mode
//! machinery, command sampling, and episode lifecycle.
//!
//! Episodes start in driving mode, where the policy tracks sampled velocity
//! and posture commands. After a random switch duration the episode enters
//! stunt mode: the guideline becomes the task, expressed relative to the base
//! pose at the trigger instant, and the policy returns to driving only by
//! reaching the final waypoint. Each episode lasts at most 20 seconds, which
//! typically fits two to five stunt executions.
//!
//! Rewards decompose into mode rewards plus regularization penalties; every
//! term is reported separately and the scalar reward is exactly their sum.
//! The guideline and key-orientations shape rewards only — they are never
//! observed by the policy.

use crate::dynamics::{
    self, apply_randomization, gaussian_noise, sample_actuation_delay, uniform_noise,
    JointTargets, PlanarBikeParams, PlanarBikeState, RandomizationConfig, SimError,
};
use crate::geometry::{quat_from_pitch, UnitQuaternion, Vec3};
use crate::guideline::{
    advance, check_termination, line_reward, pos_key_reward, seq_key_reward,
    update_sequence_activation, Guideline, GuidelineProgress, KeyOrientationSet, ProgressEvent,
    TerminationVerdict,
};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::collections::VecDeque;
use std::sync::Arc;
use thiserror::Error;

pub const ACTION_DIM: usize = 3;
pub const OBS_DIM: usize = 15;

#[derive(Debug, Error)]
pub enum EnvError {
    #[error("step called on a finished episode")]
    EpisodeOver,
    #[error(transparent)]
    Sim(#[from] SimError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Mode {
    Driving,
    Stunt,
}

/// Why an episode ended.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum TerminationCause {
    GuidelineDeviation,
    KeyOrientation,
    SequenceMonotonicity,
    Fall,
    Timeout,
}

/// Driving-mode command set: target forward velocity, yaw rate (inert in
/// the planar plant), and normalized boing extension.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct DriveCommand {
    pub v_drive: f64,
    pub omega_drive: f64,
    pub rho_drive: f64,
}

/// Sampling ranges and per-command resample intervals.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CommandConfig {
    pub v_range: (f64, f64),
    pub omega_range: (f64, f64),
    pub rho_range: (f64, f64),
    pub v_interval: (f64, f64),
    pub omega_interval: (f64, f64),
    pub rho_interval: (f64, f64),
}

impl Default for CommandConfig {
    fn default() -> Self {
        CommandConfig {
            v_range: (-1.0, 2.0),
            omega_range: (-1.5, 1.5),
            rho_range: (0.06, 1.0),
            v_interval: (2.0, 15.0),
            omega_interval: (3.0, 8.0),
            rho_interval: (3.0, 10.0),
        }
    }
}

/// Independent per-command resample timers over a [`DriveCommand`].
#[derive(Debug, Clone)]
pub struct CommandSampler {
    pub command: DriveCommand,
    timers: [f64; 3],
}

fn sample_range(rng: &mut ChaCha8Rng, range: (f64, f64)) -> f64 {
    if range.0 == range.1 {
        range.0
    } else {
        rng.random_range(range.0..range.1)
    }
}

impl CommandSampler {
    pub fn sample(rng: &mut ChaCha8Rng, config: &CommandConfig) -> Self {
        CommandSampler {
            command: DriveCommand {
                v_drive: sample_range(rng, config.v_range),
                omega_drive: sample_range(rng, config.omega_range),
                rho_drive: sample_range(rng, config.rho_range),
            },
            timers: [
                sample_range(rng, config.v_interval),
                sample_range(rng, config.omega_interval),
                sample_range(rng, config.rho_interval),
            ],
        }
    }

    /// Advances the timers; each expired command is independently resampled.
    /// Returns true when any command changed.
    pub fn update(&mut self, dt: f64, rng: &mut ChaCha8Rng, config: &CommandConfig) -> bool {
        let mut resampled = false;
        for slot in 0..3 {
            self.timers[slot] -= dt;
            if self.timers[slot] <= 0.0 {
                resampled = true;
                match slot {
                    0 => {
                        self.command.v_drive = sample_range(rng, config.v_range);
                        self.timers[0] = sample_range(rng, config.v_interval);
                    }
                    1 => {
                        self.command.omega_drive = sample_range(rng, config.omega_range);
                        self.timers[1] = sample_range(rng, config.omega_interval);
                    }
                    _ => {
                        self.command.rho_drive = sample_range(rng, config.rho_range);
                        self.timers[2] = sample_range(rng, config.rho_interval);
                    }
                }
            }
        }
        resampled
    }
}

/// Episode-level mode state.
#[derive(Debug, Clone)]
pub struct EpisodeContext {
    pub mode: Mode,
    /// Seconds since episode start.
    pub t: f64,
    /// Seconds since the current mode was entered.
    pub t_mode: f64,
    /// Sampled driving duration before the next stunt trigger.
    pub t_switch: f64,
    /// Base position at the stunt trigger (world frame).
    pub stunt_origin: [f64; 2],
    pub progress: GuidelineProgress,
    pub stunts_completed: usize,
    pub stunts_attempted: usize,
}

/// Policy observation with fixed channel order. Command channels are zero in
/// stunt mode; the stunt-relative position is zero in driving mode.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ObservationVector {
    pub joint_pos: [f64; 1],
    pub joint_vel: [f64; 2],
    pub base_ang_vel: f64,
    pub gravity_body: [f64; 2],
    pub prev_action: [f64; ACTION_DIM],
    pub mode_flag: f64,
    pub v_drive: f64,
    pub omega_drive: f64,
    pub rho_drive: f64,
    pub x_stunt: [f64; 2],
}

impl ObservationVector {
    pub const DIM: usize = OBS_DIM;

    pub fn to_array(&self) -> [f64; OBS_DIM] {
        [
            self.joint_pos[0],
            self.joint_vel[0],
            self.joint_vel[1],
            self.base_ang_vel,
            self.gravity_body[0],
            self.gravity_body[1],
            self.prev_action[0],
            self.prev_action[1],
            self.prev_action[2],
            self.mode_flag,
            self.v_drive,
            self.omega_drive,
            self.rho_drive,
            self.x_stunt[0],
            self.x_stunt[1],
        ]
    }
}

/// Normalized policy action: prismatic target, wheel speed target, and the
/// inert fork slot retained from the full robot's action layout.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct ActionVector {
    pub h_target: f64,
    pub wheel_speed_target: f64,
    pub fork: f64,
}

impl ActionVector {
    pub fn from_array(a: &[f64; ACTION_DIM]) -> Self {
        ActionVector { h_target: a[0], wheel_speed_target: a[1], fork: a[2] }
    }

    pub fn to_array(self) -> [f64; ACTION_DIM] {
        [self.h_target, self.wheel_speed_target, self.fork]
    }

    /// Clamps the normalized action and maps it to joint-space targets.
    pub fn to_targets(self, params: &PlanarBikeParams) -> JointTargets {
        let a0 = self.h_target.clamp(-1.0, 1.0);
        let a1 = self.wheel_speed_target.clamp(-1.0, 1.0);
        JointTargets {
            h_target: params.h_min + 0.5 * (a0 + 1.0) * (params.h_max - params.h_min),
            wheel_speed_target: a1 * params.wheel_speed_limit,
        }
    }
}

/// Per-term reward breakdown; the step reward is exactly the sum.
#[derive(Debug, Clone, Copy, Default, Serialize, Deserialize)]
pub struct RewardTerms {
    pub line: f64,
    pub key_position: f64,
    pub key_sequence: f64,
    pub lin_vel_track: f64,
    pub ang_vel_track: f64,
    pub boing_pos_track: f64,
    pub action_smoothness: f64,
    pub fork_velocity: f64,
    pub contact_force: f64,
    pub joint_limits: f64,
    pub velocity_penalty: f64,
}

impl RewardTerms {
    pub fn total(&self) -> f64 {
        self.line
            + self.key_position
            + self.key_sequence
            + self.lin_vel_track
            + self.ang_vel_track
            + self.boing_pos_track
            + self.action_smoothness
            + self.fork_velocity
            + self.contact_force
            + self.joint_limits
            + self.velocity_penalty
    }
}

/// A flight-to-ground transition worth reporting: used for landing-pitch
/// statistics.
#[derive(Debug, Clone, Copy)]
pub struct LandingEvent {
    /// Base pitch at touchdown (rad).
    pub pitch: f64,
    /// Base apex height above the pre-flight base height (m).
    pub apex_height: f64,
    pub during_stunt: bool,
}

#[derive(Debug, Clone, Default)]
pub struct EnvStepInfo {
    pub reward_terms: RewardTerms,
    pub mode: Option<Mode>,
    pub termination: Option<TerminationCause>,
    pub stunt_completed: bool,
    pub stunt_triggered: bool,
    pub landing: Option<LandingEvent>,
    /// Mean ground normal force over the control step (N).
    pub f_contact: f64,
    pub base_pos: [f64; 2],
}

/// Environment configuration: the task, actuation rates, and randomization.
#[derive(Debug, Clone)]
pub struct EnvConfig {
    pub guideline: Arc<Guideline>,
    pub keys: Arc<KeyOrientationSet>,
    pub params: PlanarBikeParams,
    pub commands: CommandConfig,
    pub randomization: RandomizationConfig,
    pub episode_seconds: f64,
    pub control_hz: f64,
    pub physics_substeps: usize,
    pub t_switch_range: (f64, f64),
    /// Initial prismatic target at reset (normalized to [0, 1]).
    pub reset_rho: f64,
}

impl EnvConfig {
    pub fn new(guideline: Guideline, keys: KeyOrientationSet) -> Self {
        EnvConfig {
            guideline: Arc::new(guideline),
            keys: Arc::new(keys),
            params: PlanarBikeParams::default(),
            commands: CommandConfig::default(),
            randomization: RandomizationConfig::default(),
            episode_seconds: 20.0,
            control_hz: 50.0,
            physics_substeps: 4,
            t_switch_range: (2.0, 5.0),
            reset_rho: 0.5,
        }
    }

    pub fn control_dt(&self) -> f64 {
        1.0 / self.control_hz
    }

    pub fn physics_dt(&self) -> f64 {
        self.control_dt() / self.physics_substeps as f64
    }

    pub fn max_steps(&self) -> usize {
        (self.episode_seconds * self.control_hz).round() as usize
    }
}

/// Driving-mode tracking reward: three exponential terms over the command
/// errors, three points each at perfect tracking.
pub fn driving_reward(
    state: &PlanarBikeState,
    params: &PlanarBikeParams,
    cmd: &DriveCommand,
) -> (f64, f64, f64) {
    let v_base = state.chassis_velocity(params)[0];
    // The planar model has no yaw; the yaw rate field evaluates to zero.
    let omega_base = 0.0;
    let rho = (state.h - params.h_min) / (params.h_max - params.h_min);
    let lin = 3.0 * (-(v_base - cmd.v_drive).powi(2)).exp();
    let ang = 3.0 * (-(omega_base - cmd.omega_drive) * (omega_base - cmd.omega_drive)).exp();
    let boing = 3.0 * (-(rho - cmd.rho_drive).powi(2)).exp();
    (lin, ang, boing)
}

/// Regularization penalties applied in both modes. `f_contact` is the mean
/// ground normal force over the control step.
pub fn regularization_penalties(
    state: &PlanarBikeState,
    params: &PlanarBikeParams,
    action: &ActionVector,
    prev_action: &ActionVector,
    f_contact: f64,
) -> (f64, f64, f64, f64, f64) {
    let da = [
        action.h_target - prev_action.h_target,
        action.wheel_speed_target - prev_action.wheel_speed_target,
        action.fork - prev_action.fork,
    ];
    let smooth = -1e-4 * (da[0] * da[0] + da[1] * da[1] + da[2] * da[2]);
    // No fork joint exists in the plane; its velocity is identically zero.
    let fork_vel = -0.001 * 0.0;
    let over = (f_contact - 350.0).max(0.0);
    let contact = -1e-6 * over * over;
    let h_in = state.h >= params.h_min - 1e-9 && state.h <= params.h_max + 1e-9;
    let wheel_in = state.wheel_speed.abs() <= params.wheel_speed_limit + 1e-9;
    let joint_limits = if h_in && wheel_in { 0.0 } else { -1.0 };
    let v = state.chassis_velocity(params);
    let speed = (v[0] * v[0] + v[1] * v[1]).sqrt();
    let over_speed = (speed - 2.0).max(0.0);
    let vel = -3.0 * over_speed * over_speed;
    (smooth, fork_vel, contact, joint_limits, vel)
}

/// Additive observation noise per the randomization table.
pub fn perturb_observation(
    obs: &mut ObservationVector,
    config: &RandomizationConfig,
    rng: &mut ChaCha8Rng,
) {
    obs.joint_pos[0] += gaussian_noise(config.obs_noise_joint_pos_std, rng);
    obs.joint_vel[0] += gaussian_noise(config.obs_noise_joint_vel_std, rng);
    obs.joint_vel[1] += gaussian_noise(config.obs_noise_joint_vel_std, rng);
    obs.base_ang_vel += uniform_noise(config.obs_noise_ang_vel_range, rng);
    obs.gravity_body[0] += uniform_noise(config.obs_noise_gravity_range, rng);
    obs.gravity_body[1] += uniform_noise(config.obs_noise_gravity_range, rng);
}

/// Applies the driving/stunt transitions: a trigger after `t_switch` seconds
/// of driving, and a return to driving when the guideline is finished.
pub fn mode_transition(
    ctx: &mut EpisodeContext,
    base: [f64; 2],
    rng: &mut ChaCha8Rng,
    t_switch_range: (f64, f64),
) -> (bool, bool) {
    let mut triggered = false;
    let mut completed = false;
    match ctx.mode {
        Mode::Driving => {
            if ctx.t_mode >= ctx.t_switch {
                ctx.mode = Mode::Stunt;
                ctx.t_mode = 0.0;
                ctx.stunt_origin = base;
                ctx.progress = GuidelineProgress::new();
                ctx.stunts_attempted += 1;
                triggered = true;
            }
        }
        Mode::Stunt => {
            if ctx.progress.finished {
                ctx.mode = Mode::Driving;
                ctx.t_mode = 0.0;
                ctx.t_switch = sample_range(rng, t_switch_range);
                ctx.stunts_completed += 1;
                completed = true;
            }
        }
    }
    (triggered, completed)
}

/// One simulation environment instance. Deterministic per `(config, seed,
/// action sequence)`.
pub struct Env {
    pub config: EnvConfig,
    params: PlanarBikeParams,
    state: PlanarBikeState,
    ctx: EpisodeContext,
    sampler: CommandSampler,
    rng: ChaCha8Rng,
    prev_action: ActionVector,
    action_queue: VecDeque<ActionVector>,
    actuation_delay: usize,
    prev_base: [f64; 2],
    prev_quat: UnitQuaternion,
    steps: usize,
    done: bool,
    episode_seed: u64,
    episode_counter: u64,
    // Flight bookkeeping for landing events.
    airborne_steps: usize,
    flight_apex: f64,
    preflight_base_z: f64,
}

impl Env {
    pub fn new(config: EnvConfig, seed: u64) -> Self {
        let params = config.params.clone();
        let mut env = Env {
            state: dynamics::rest_state(&params, 0.0),
            params,
            ctx: EpisodeContext {
                mode: Mode::Driving,
                t: 0.0,
                t_mode: 0.0,
                t_switch: 0.0,
                stunt_origin: [0.0, 0.0],
                progress: GuidelineProgress::new(),
                stunts_completed: 0,
                stunts_attempted: 0,
            },
            sampler: CommandSampler {
                command: DriveCommand { v_drive: 0.0, omega_drive: 0.0, rho_drive: 0.5 },
                timers: [1.0; 3],
            },
            rng: ChaCha8Rng::seed_from_u64(seed),
            prev_action: ActionVector::default(),
            action_queue: VecDeque::new(),
            actuation_delay: 0,
            prev_base: [0.0, 0.0],
            prev_quat: UnitQuaternion::IDENTITY,
            steps: 0,
            done: true,
            episode_seed: seed,
            episode_counter: 0,
            airborne_steps: 0,
            flight_apex: 0.0,
            preflight_base_z: 0.0,
            config,
        };
        env.reset(seed);
        env
    }

    /// Starts a fresh episode from the given seed: robot at rest on the
    /// ground in driving mode, commands and randomization sampled.
    pub fn reset(&mut self, seed: u64) -> ObservationVector {
        self.episode_seed = seed;
        self.rng = ChaCha8Rng::seed_from_u64(seed);
        self.params = apply_randomization(
            &self.config.params,
            &self.config.randomization,
            self.rng.random(),
        );
        self.actuation_delay =
            sample_actuation_delay(&self.config.randomization, &mut self.rng);
        let h_target = self.config.params.h_min
            + self.config.reset_rho * (self.config.params.h_max - self.config.params.h_min);
        self.state = dynamics::rest_state(&self.params, h_target);
        self.ctx = EpisodeContext {
            mode: Mode::Driving,
            t: 0.0,
            t_mode: 0.0,
            t_switch: sample_range(&mut self.rng, self.config.t_switch_range),
            stunt_origin: [0.0, 0.0],
            progress: GuidelineProgress::new(),
            stunts_completed: 0,
            stunts_attempted: 0,
        };
        self.sampler = CommandSampler::sample(&mut self.rng, &self.config.commands);
        self.prev_action = ActionVector::default();
        self.action_queue.clear();
        for _ in 0..self.actuation_delay {
            self.action_queue.push_back(ActionVector::default());
        }
        self.prev_base = self.state.chassis_pos(&self.params);
        self.prev_quat = quat_from_pitch(self.state.phi);
        self.steps = 0;
        self.done = false;
        self.airborne_steps = 0;
        self.flight_apex = 0.0;
        self.preflight_base_z = self.prev_base[1];
        self.observe()
    }

    /// Deterministically derives the next episode seed and resets.
    pub fn reset_next(&mut self) -> ObservationVector {
        self.episode_counter += 1;
        let seed = self
            .episode_seed
            .wrapping_mul(0x9E3779B97F4A7C15)
            .wrapping_add(self.episode_counter);
        self.reset(seed)
    }

    pub fn is_done(&self) -> bool {
        self.done
    }

    pub fn mode(&self) -> Mode {
        self.ctx.mode
    }

    pub fn context(&self) -> &EpisodeContext {
        &self.ctx
    }

    pub fn state(&self) -> &PlanarBikeState {
        &self.state
    }

    pub fn elapsed(&self) -> f64 {
        self.ctx.t
    }

    fn base_quat(&self) -> UnitQuaternion {
        quat_from_pitch(self.state.phi)
    }

    fn fall_detected(&self) -> bool {
        let half = 0.5 * self.params.wheelbase + 0.1;
        let front = self.state.chassis_point(&self.params, [half, 0.0]);
        let rear = self.state.chassis_point(&self.params, [-half, 0.0]);
        let boing = self.state.boing_pos(&self.params);
        front[1] <= 0.02 || rear[1] <= 0.02 || boing[1] <= 0.05
    }

    fn observe(&mut self) -> ObservationVector {
        let (fwd, up) = dynamics::frame_axes(self.state.phi);
        // Gravity direction expressed in the base frame.
        let g_body = [-fwd[1], -up[1]];
        let stunt = self.ctx.mode == Mode::Stunt;
        let base = self.state.chassis_pos(&self.params);
        let mut obs = ObservationVector {
            joint_pos: [self.state.h],
            joint_vel: [self.state.hdot, self.state.wheel_speed - self.state.phidot],
            base_ang_vel: self.state.phidot,
            gravity_body: g_body,
            prev_action: self.prev_action.to_array(),
            mode_flag: if stunt { 1.0 } else { 0.0 },
            v_drive: if stunt { 0.0 } else { self.sampler.command.v_drive },
            omega_drive: if stunt { 0.0 } else { self.sampler.command.omega_drive },
            rho_drive: if stunt { 0.0 } else { self.sampler.command.rho_drive },
            x_stunt: if stunt {
                [base[0] - self.ctx.stunt_origin[0], base[1] - self.ctx.stunt_origin[1]]
            } else {
                [0.0, 0.0]
            },
        };
        perturb_observation(&mut obs, &self.config.randomization, &mut self.rng);
        obs
    }

    /// Applies one policy action at the control rate.
    pub fn step(&mut self, action: &[f64; ACTION_DIM]) -> Result<(ObservationVector, f64, bool, EnvStepInfo), EnvError> {
        if self.done {
            return Err(EnvError::EpisodeOver);
        }
        let action = ActionVector::from_array(action);
        // Actuation delay: the effective action may lag by sampled steps.
        self.action_queue.push_back(action);
        let effective = self.action_queue.pop_front().unwrap_or(action);
        let targets = effective.to_targets(&self.params);

        let mut info = EnvStepInfo::default();
        let prev_base_world = self.state.chassis_pos(&self.params);
        let q_prev = self.prev_quat;

        // Physics substeps.
        let dt = self.config.physics_dt();
        let mut impulse_sum = 0.0;
        for _ in 0..self.config.physics_substeps {
            let (next, step_info) = dynamics::step(&self.state, targets, &self.params, dt)?;
            impulse_sum += step_info.normal_impulse_rear + step_info.normal_impulse_front;
            self.state = next;
        }
        let f_contact_mean = impulse_sum / self.config.control_dt();
        info.f_contact = f_contact_mean;

        self.steps += 1;
        self.ctx.t += self.config.control_dt();
        self.ctx.t_mode += self.config.control_dt();

        let base = self.state.chassis_pos(&self.params);
        info.base_pos = base;
        let displacement = {
            let dx = base[0] - prev_base_world[0];
            let dz = base[1] - prev_base_world[1];
            (dx * dx + dz * dz).sqrt()
        };
        let q_now = self.base_quat();

        // Flight bookkeeping for landing statistics.
        let grounded = self.state.rear_contact || self.state.front_contact;
        if grounded {
            if self.airborne_steps >= 3 {
                info.landing = Some(LandingEvent {
                    pitch: self.state.phi,
                    apex_height: self.flight_apex - self.preflight_base_z,
                    during_stunt: self.ctx.mode == Mode::Stunt,
                });
            }
            self.airborne_steps = 0;
            self.preflight_base_z = base[1];
            self.flight_apex = base[1];
        } else {
            self.airborne_steps += 1;
            self.flight_apex = self.flight_apex.max(base[1]);
        }

        // Mode rewards.
        let mut terms = RewardTerms::default();
        let mut termination = None;
        match self.ctx.mode {
            Mode::Driving => {
                let (lin, ang, boing) =
                    driving_reward(&self.state, &self.params, &self.sampler.command);
                terms.lin_vel_track = lin;
                terms.ang_vel_track = ang;
                terms.boing_pos_track = boing;
            }
            Mode::Stunt => {
                let gl: &Guideline = &self.config.guideline;
                let rel = |p: [f64; 2]| {
                    Vec3::new(p[0] - self.ctx.stunt_origin[0], 0.0, p[1] - self.ctx.stunt_origin[1])
                };
                let x_prev = rel(prev_base_world);
                let x_now = rel(base);
                terms.line = line_reward(&mut self.ctx.progress, x_prev, x_now, gl);
                let event = advance(&mut self.ctx.progress, x_now, displacement, gl);
                if event == ProgressEvent::Finished {
                    info.stunt_completed = true;
                } else if check_termination(&self.ctx.progress, x_now, gl)
                    == TerminationVerdict::Terminate
                {
                    termination = Some(TerminationCause::GuidelineDeviation);
                }
                for key in &self.config.keys.position_keys {
                    let (r, verdict) = pos_key_reward(q_now, key, x_now, gl)
                        .expect("validated key orientations");
                    terms.key_position += r;
                    if verdict == TerminationVerdict::Terminate && termination.is_none() {
                        termination = Some(TerminationCause::KeyOrientation);
                    }
                }
                update_sequence_activation(&mut self.ctx.progress, &self.config.keys);
                if let Some(active) = self.ctx.progress.active_seq {
                    let seq = &self.config.keys.sequences[active.seq_index];
                    let out = seq_key_reward(q_now, q_prev, seq, &mut self.ctx.progress)
                        .expect("validated sequence");
                    terms.key_sequence = out.reward;
                    if out.verdict == TerminationVerdict::Terminate && termination.is_none() {
                        termination = Some(TerminationCause::SequenceMonotonicity);
                    }
                }
            }
        }

        // Regularization penalties apply in both modes.
        let (smooth, fork_vel, contact, joint_limits, vel) = regularization_penalties(
            &self.state,
            &self.params,
            &action,
            &self.prev_action,
            f_contact_mean,
        );
        terms.action_smoothness = smooth;
        terms.fork_velocity = fork_vel;
        terms.contact_force = contact;
        terms.joint_limits = joint_limits;
        terms.velocity_penalty = vel;

        // Fall and timeout terminations.
        if termination.is_none() && self.fall_detected() {
            termination = Some(TerminationCause::Fall);
        }
        if termination.is_none() && self.ctx.t >= self.config.episode_seconds - 1e-9 {
            termination = Some(TerminationCause::Timeout);
        }

        // Mode transitions act at the end of the step so the next
        // observation reflects them exactly (x_stunt is zero at trigger).
        if termination.is_none() {
            let (triggered, completed) =
                mode_transition(&mut self.ctx, base, &mut self.rng, self.config.t_switch_range);
            info.stunt_triggered = triggered;
            if completed {
                info.stunt_completed = true;
            }
        }

        // Command resampling (driving-relevant; timers always run) plus the
        // body-velocity disturbance kick at resample events.
        if self.sampler.update(self.config.control_dt(), &mut self.rng, &self.config.commands) {
            let amp = self.config.randomization.body_velocity_disturbance;
            if amp > 0.0 {
                self.state.xdot_com += uniform_noise(amp, &mut self.rng);
                self.state.zdot_com += uniform_noise(amp, &mut self.rng);
            }
        }

        self.prev_action = action;
        self.prev_quat = q_now;
        self.prev_base = base;

        if let Some(cause) = termination {
            self.done = true;
            info.termination = Some(cause);
        }
        info.mode = Some(self.ctx.mode);
        info.reward_terms = terms;
        let reward = terms.total();
        let obs = self.observe();
        Ok((obs, reward, self.done, info))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::{sample_dense, HermiteSegment};
    use crate::guideline::build_guideline;
    use approx::assert_relative_eq;

    fn straight_guideline(len: f64, k: usize, margin: f64) -> Guideline {
        let seg = HermiteSegment::line(Vec3::ZERO, Vec3::new(len, 0.0, 0.0));
        build_guideline(&sample_dense(&[seg], 1000).unwrap(), k, margin).unwrap()
    }

    fn quiet_config() -> EnvConfig {
        let mut config = EnvConfig::new(straight_guideline(2.0, 5, 0.3), KeyOrientationSet::default());
        config.randomization = RandomizationConfig::disabled();
        config
    }

    #[test]
    fn reset_is_seed_deterministic() {
        let mut a = Env::new(quiet_config(), 7);
        let mut b = Env::new(quiet_config(), 7);
        assert_eq!(a.reset(42).to_array(), b.reset(42).to_array());
        let action = [0.1, 0.2, 0.0];
        for _ in 0..50 {
            let ra = a.step(&action).unwrap();
            let rb = b.step(&action).unwrap();
            assert_eq!(ra.0.to_array(), rb.0.to_array());
            assert_eq!(ra.1, rb.1);
        }
    }

    #[test]
    fn reset_state_and_masking() {
        let mut env = Env::new(quiet_config(), 3);
        let obs = env.reset(3);
        assert_eq!(env.mode(), Mode::Driving);
        assert_eq!(obs.mode_flag, 0.0);
        assert_eq!(obs.x_stunt, [0.0, 0.0]);
        // Driving commands are present in the observation.
        assert!(obs.rho_drive > 0.0);
        // t_switch sampled in range.
        let t = env.context().t_switch;
        assert!((2.0..=5.0).contains(&t));
    }

    #[test]
    fn driving_reward_examples() {
        let params = PlanarBikeParams::default();
        let state = dynamics::rest_state(&params, 0.25);
        let rho = (state.h - params.h_min) / (params.h_max - params.h_min);
        // All three errors zero: 9.0.
        let cmd = DriveCommand { v_drive: 0.0, omega_drive: 0.0, rho_drive: rho };
        let (lin, ang, boing) = driving_reward(&state, &params, &cmd);
        assert_relative_eq!(lin + ang + boing, 9.0, epsilon = 1e-12);
        // Lin-vel error of 1 m/s with others perfect.
        let cmd = DriveCommand { v_drive: 1.0, omega_drive: 0.0, rho_drive: rho };
        let (lin, ang, boing) = driving_reward(&state, &params, &cmd);
        assert_relative_eq!(lin + ang + boing, 3.0 * (-1.0f64).exp() + 6.0, epsilon = 1e-12);
    }

    #[test]
    fn regularization_examples() {
        let params = PlanarBikeParams::default();
        let state = dynamics::rest_state(&params, 0.25);
        let a = ActionVector::default();
        // Steady, in-limit, slow, light contact: all terms zero.
        let (smooth, fork, contact, limits, vel) =
            regularization_penalties(&state, &params, &a, &a, 255.0);
        assert_eq!(smooth + fork + contact + limits + vel, 0.0);
        // 400 N of contact force: hinge at 350.
        let (_, _, contact, _, _) = regularization_penalties(&state, &params, &a, &a, 400.0);
        assert_relative_eq!(contact, -1e-6 * 2500.0, epsilon = 1e-15);
        // Action jump of norm 2.
        let b = ActionVector { h_target: 2.0, wheel_speed_target: 0.0, fork: 0.0 };
        let (smooth, _, _, _, _) = regularization_penalties(&state, &params, &b, &a, 0.0);
        assert_relative_eq!(smooth, -4e-4, epsilon = 1e-15);
    }

    #[test]
    fn velocity_penalty_kicks_in_above_two() {
        let params = PlanarBikeParams::default();
        let mut state = dynamics::rest_state(&params, 0.25);
        state.xdot_com = 2.5;
        let a = ActionVector::default();
        let (_, _, _, _, vel) = regularization_penalties(&state, &params, &a, &a, 0.0);
        assert_relative_eq!(vel, -3.0 * 0.25, epsilon = 1e-9);
    }

    #[test]
    fn mode_transition_trigger_and_completion() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut ctx = EpisodeContext {
            mode: Mode::Driving,
            t: 3.0,
            t_mode: 3.0,
            t_switch: 3.0,
            stunt_origin: [0.0, 0.0],
            progress: GuidelineProgress::new(),
            stunts_completed: 0,
            stunts_attempted: 0,
        };
        let (triggered, _) = mode_transition(&mut ctx, [1.5, 0.3], &mut rng, (2.0, 5.0));
        assert!(triggered);
        assert_eq!(ctx.mode, Mode::Stunt);
        assert_eq!(ctx.stunt_origin, [1.5, 0.3]);
        assert_eq!(ctx.stunts_attempted, 1);
        assert_eq!(ctx.progress.traveled, 0.0);
        // Finishing the guideline returns to driving with a fresh t_switch.
        ctx.progress.finished = true;
        let (_, completed) = mode_transition(&mut ctx, [2.0, 0.3], &mut rng, (2.0, 5.0));
        assert!(completed);
        assert_eq!(ctx.mode, Mode::Driving);
        assert_eq!(ctx.stunts_completed, 1);
        assert!((2.0..=5.0).contains(&ctx.t_switch));
    }

    #[test]
    fn x_stunt_zero_at_trigger_and_commands_masked() {
        let mut config = quiet_config();
        config.t_switch_range = (0.1, 0.1);
        let mut env = Env::new(config, 5);
        env.reset(5);
        let mut obs = None;
        for _ in 0..20 {
            let (o, _, done, info) = env.step(&[0.0, 0.0, 0.0]).unwrap();
            if info.stunt_triggered {
                obs = Some(o);
                break;
            }
            assert!(!done);
        }
        let obs = obs.expect("stunt must trigger");
        assert_eq!(obs.mode_flag, 1.0);
        assert_eq!(obs.x_stunt, [0.0, 0.0]);
        assert_eq!(obs.v_drive, 0.0);
        assert_eq!(obs.omega_drive, 0.0);
        assert_eq!(obs.rho_drive, 0.0);
    }

    #[test]
    fn reward_decomposition_sums_exactly() {
        let mut env = Env::new(quiet_config(), 11);
        env.reset(11);
        for i in 0..200 {
            let action = [((i as f64) * 0.1).sin() * 0.3, 0.4, 0.0];
            let (_, reward, done, info) = env.step(&action).unwrap();
            assert!((reward - info.reward_terms.total()).abs() <= 1e-12);
            if done {
                break;
            }
        }
    }

    #[test]
    fn episode_times_out_and_done_is_sticky() {
        let mut config = quiet_config();
        config.episode_seconds = 0.5;
        // Keep driving the whole episode.
        config.t_switch_range = (100.0, 100.0);
        let mut env = Env::new(config, 2);
        env.reset(2);
        let mut steps = 0;
        loop {
            let (_, _, done, info) = env.step(&[0.0, 0.0, 0.0]).unwrap();
            steps += 1;
            if done {
                assert_eq!(info.termination, Some(TerminationCause::Timeout));
                break;
            }
            assert!(steps <= 25, "episode exceeded its budget");
        }
        assert!(env.is_done());
        assert!(matches!(env.step(&[0.0, 0.0, 0.0]), Err(EnvError::EpisodeOver)));
    }

    #[test]
    fn quiet_driving_does_not_fall() {
        let mut config = quiet_config();
        config.t_switch_range = (100.0, 100.0);
        let mut env = Env::new(config, 9);
        env.reset(9);
        for _ in 0..500 {
            let (_, _, done, info) = env.step(&[0.0, 0.3, 0.0]).unwrap();
            assert!(info.termination != Some(TerminationCause::Fall));
            if done {
                break;
            }
        }
    }

    #[test]
    fn perturb_observation_zero_noise_is_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut obs = ObservationVector {
            joint_pos: [0.2],
            joint_vel: [0.1, -0.4],
            base_ang_vel: 0.3,
            gravity_body: [0.0, -1.0],
            prev_action: [0.0; 3],
            mode_flag: 0.0,
            v_drive: 1.0,
            omega_drive: 0.0,
            rho_drive: 0.5,
            x_stunt: [0.0, 0.0],
        };
        let before = obs;
        perturb_observation(&mut obs, &RandomizationConfig::disabled(), &mut rng);
        assert_eq!(obs, before);
    }

    #[test]
    fn joint_vel_noise_matches_configured_std() {
        let mut rng = ChaCha8Rng::seed_from_u64(123);
        let config = RandomizationConfig::default();
        let n = 100_000;
        let mut sum = 0.0;
        let mut sum_sq = 0.0;
        for _ in 0..n {
            let v = gaussian_noise(config.obs_noise_joint_vel_std, &mut rng);
            sum += v;
            sum_sq += v * v;
        }
        let mean = sum / n as f64;
        let std = (sum_sq / n as f64 - mean * mean).sqrt();
        assert!((std - 0.1).abs() <= 0.005, "std {std}");
        assert_eq!(config.obs_noise_joint_pos_std, 0.001);
    }

    #[test]
    fn command_sampler_ranges_and_independence() {
        let config = CommandConfig::default();
        let mut rng = ChaCha8Rng::seed_from_u64(77);
        let mut sampler = CommandSampler::sample(&mut rng, &config);
        let mut v_changes = 0;
        let mut rho_changes = 0;
        let mut last = sampler.command;
        for _ in 0..10_000 {
            sampler.update(0.02, &mut rng, &config);
            let c = sampler.command;
            assert!((-1.0..=2.0).contains(&c.v_drive));
            assert!((-1.5..=1.5).contains(&c.omega_drive));
            assert!((0.06..=1.0).contains(&c.rho_drive));
            if c.v_drive != last.v_drive {
                v_changes += 1;
            }
            if c.rho_drive != last.rho_drive {
                rho_changes += 1;
            }
            last = c;
        }
        // 200 s of simulated time: both commands resample many times, at
        // their own cadences.
        assert!(v_changes >= 10, "v resamples {v_changes}");
        assert!(rho_changes >= 20, "rho resamples {rho_changes}");
        assert_ne!(v_changes, rho_changes);
    }
}

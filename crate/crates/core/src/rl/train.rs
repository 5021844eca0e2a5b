//! Training loop, evaluation rollouts, checkpoints, and metrics records.
//!
//! Collection is data-parallel across environments: each environment slot
//! owns its instance and RNG stream and fills its own trajectory rows, so
//! results are bit-identical regardless of thread count. The update step
//! runs once per iteration over the aggregated buffer. Two runs with the
//! same seed and configuration produce identical metrics logs.

use super::net::{ForwardCache, RunningNorm};
use super::ppo::{
    gae_advantages, ppo_update, Policy, PolicySpec, PpoOptimizer, RlError, RolloutBuffer,
    UpdateStats,
};
use crate::env::{Env, EnvConfig, LandingEvent, Mode, TerminationCause, ACTION_DIM, OBS_DIM};
use crate::geometry::Vec3;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use std::io::{Read, Write};
use std::path::{Path, PathBuf};

pub use super::ppo::PPOConfig;

#[derive(Debug, thiserror::Error)]
pub enum TrainError {
    #[error(transparent)]
    Rl(#[from] RlError),
    #[error(transparent)]
    Env(#[from] crate::env::EnvError),
    #[error("checkpoint io: {0}")]
    Io(#[from] std::io::Error),
    #[error("bad checkpoint: {0}")]
    BadCheckpoint(String),
}

/// Episode-termination counts for one metrics window.
#[derive(Debug, Clone, Copy, Default, Serialize, Deserialize, PartialEq, Eq)]
pub struct TerminationCounts {
    pub guideline: usize,
    pub key_orientation: usize,
    pub sequence: usize,
    pub fall: usize,
    pub timeout: usize,
}

impl TerminationCounts {
    fn record(&mut self, cause: TerminationCause) {
        match cause {
            TerminationCause::GuidelineDeviation => self.guideline += 1,
            TerminationCause::KeyOrientation => self.key_orientation += 1,
            TerminationCause::SequenceMonotonicity => self.sequence += 1,
            TerminationCause::Fall => self.fall += 1,
            TerminationCause::Timeout => self.timeout += 1,
        }
    }
}

/// One line of the metrics log. Contains no wall-clock data so identical
/// runs serialize identically.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MetricsRecord {
    pub iteration: usize,
    pub env_steps: usize,
    pub episodes: usize,
    pub episode_return_mean: f64,
    pub episode_len_mean: f64,
    pub stunts_attempted: usize,
    pub stunts_completed: usize,
    pub terminations: TerminationCounts,
    pub policy_loss: f64,
    pub value_loss: f64,
    pub entropy: f64,
    pub approx_kl: f64,
    pub clip_fraction: f64,
    pub eval_success_rate: Option<f64>,
}

/// Evaluation metrics over deterministic-action rollouts.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EvalMetrics {
    pub episodes: usize,
    pub stunts_attempted: usize,
    pub stunts_completed: usize,
    /// Completed / attempted stunts across all episodes.
    pub success_rate: f64,
    pub completed_per_episode: f64,
    pub attempted_per_episode: f64,
    pub episode_return_mean: f64,
    /// Mean distance to the active waypoint over stunt-mode steps (m).
    pub mean_tracking_error: f64,
    /// Per-episode mean stunt landing pitch, degrees.
    pub landing_pitch_deg: Vec<f64>,
    pub median_landing_pitch_deg: Option<f64>,
    pub terminations: TerminationCounts,
}

#[derive(Debug, Clone)]
pub struct TrainConfig {
    pub ppo: PPOConfig,
    pub hidden: Vec<usize>,
    /// Run an evaluation every this many iterations (0 disables).
    pub eval_every_iters: usize,
    pub eval_episodes: usize,
    /// Stop early when an evaluation reaches this stunt success rate.
    pub success_stop: Option<f64>,
    /// Write checkpoints every this many iterations (0 disables).
    pub checkpoint_every_iters: usize,
    pub out_dir: Option<PathBuf>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            ppo: PPOConfig::default(),
            hidden: vec![256, 128],
            eval_every_iters: 0,
            eval_episodes: 20,
            success_stop: None,
            checkpoint_every_iters: 0,
            out_dir: None,
        }
    }
}

pub struct TrainResult {
    pub policy: Policy,
    pub normalizer: RunningNorm,
    pub metrics: Vec<MetricsRecord>,
    pub env_steps: usize,
    pub stopped_early: bool,
}

struct StepRow {
    obs_norm: Vec<f64>,
    obs_raw: [f64; OBS_DIM],
    action: [f64; ACTION_DIM],
    log_prob: f64,
    value: f64,
    reward: f64,
    done: bool,
}

#[derive(Debug, Clone, Default)]
struct EpisodeStat {
    ret: f64,
    len: usize,
    stunts_attempted: usize,
    stunts_completed: usize,
    termination: Option<TerminationCause>,
}

struct EnvSlot {
    env: Env,
    rng: ChaCha8Rng,
    obs_raw: [f64; OBS_DIM],
    ep_return: f64,
    ep_len: usize,
    rows: Vec<StepRow>,
    bootstrap: f64,
    finished: Vec<EpisodeStat>,
    /// Discounted return accumulator feeding the reward scale estimate.
    disc_return: f64,
}

/// Running standard deviation of discounted returns; rewards are divided by
/// it before entering the buffer so value targets stay O(1) regardless of
/// the reward magnitudes.
#[derive(Debug, Clone)]
struct RewardScale {
    var: f64,
    count: f64,
    mean: f64,
}

impl RewardScale {
    fn new() -> Self {
        RewardScale { var: 1.0, count: 1e-4, mean: 0.0 }
    }

    fn update(&mut self, value: f64) {
        self.count += 1.0;
        let delta = value - self.mean;
        self.mean += delta / self.count;
        self.var += delta * (value - self.mean);
    }

    fn scale(&self) -> f64 {
        (self.var / self.count).sqrt().max(1e-4)
    }
}

fn collect_rollout(
    slots: &mut [EnvSlot],
    policy: &Policy,
    normalizer: &RunningNorm,
    horizon: usize,
) -> Result<(), TrainError> {
    let results: Vec<Result<(), TrainError>> = slots
        .par_iter_mut()
        .map(|slot| {
            slot.rows.clear();
            slot.finished.clear();
            let mut cache = ForwardCache::default();
            let mut obs_norm = vec![0.0; OBS_DIM];
            for _ in 0..horizon {
                normalizer.normalize(&slot.obs_raw, &mut obs_norm);
                let (action_vec, log_prob, value) =
                    policy.act(&obs_norm, &mut slot.rng, &mut cache);
                let action: [f64; ACTION_DIM] =
                    [action_vec[0], action_vec[1], action_vec[2]];
                let (obs, reward, done, info) = slot.env.step(&action)?;
                slot.ep_return += reward;
                slot.ep_len += 1;
                slot.rows.push(StepRow {
                    obs_norm: obs_norm.clone(),
                    obs_raw: slot.obs_raw,
                    action,
                    log_prob,
                    value,
                    reward,
                    done,
                });
                if done {
                    slot.finished.push(EpisodeStat {
                        ret: slot.ep_return,
                        len: slot.ep_len,
                        stunts_attempted: slot.env.context().stunts_attempted,
                        stunts_completed: slot.env.context().stunts_completed,
                        termination: info.termination,
                    });
                    slot.ep_return = 0.0;
                    slot.ep_len = 0;
                    slot.obs_raw = slot.env.reset_next().to_array();
                } else {
                    slot.obs_raw = obs.to_array();
                }
            }
            normalizer.normalize(&slot.obs_raw, &mut obs_norm);
            slot.bootstrap = policy.value(&obs_norm, &mut cache);
            Ok(())
        })
        .collect();
    for r in results {
        r?;
    }
    Ok(())
}

/// Trains a policy with PPO over parallel environments.
///
/// `total_steps = 0` returns the freshly initialized policy unchanged.
pub fn train(env_config: &EnvConfig, config: &TrainConfig) -> Result<TrainResult, TrainError> {
    config.ppo.validate()?;
    let spec = PolicySpec::new(OBS_DIM, ACTION_DIM, config.hidden.clone());
    let mut policy = Policy::init(spec, config.ppo.seed);
    let mut normalizer = RunningNorm::new(OBS_DIM);
    let mut optimizer = PpoOptimizer::new(&policy);

    let mut slots: Vec<EnvSlot> = (0..config.ppo.n_envs)
        .map(|i| {
            use rand::SeedableRng;
            let seed = config.ppo.seed.wrapping_add(1 + i as u64);
            let mut env = Env::new(env_config.clone(), seed);
            let obs = env.reset(seed).to_array();
            EnvSlot {
                env,
                rng: ChaCha8Rng::seed_from_u64(seed ^ 0x517C_C1B7_2722_0A95),
                obs_raw: obs,
                ep_return: 0.0,
                ep_len: 0,
                rows: Vec::new(),
                bootstrap: 0.0,
                finished: Vec::new(),
                disc_return: 0.0,
            }
        })
        .collect();

    let mut metrics = Vec::new();
    let mut env_steps = 0usize;
    let mut iteration = 0usize;
    let mut stopped_early = false;
    let steps_per_iter = config.ppo.n_envs * config.ppo.horizon;
    let mut reward_scale = RewardScale::new();

    while env_steps < config.ppo.total_steps {
        iteration += 1;
        collect_rollout(&mut slots, &policy, &normalizer, config.ppo.horizon)?;
        env_steps += steps_per_iter;

        // Normalizer statistics update in deterministic slot order, after
        // the batch was collected with the previous snapshot.
        for slot in &slots {
            for row in &slot.rows {
                normalizer.update(&row.obs_raw);
            }
        }
        // Reward scale from discounted-return magnitudes, snapshotted before
        // this batch is normalized.
        let scale = reward_scale.scale();
        for slot in slots.iter_mut() {
            for row in &slot.rows {
                slot.disc_return =
                    row.reward + config.ppo.gamma * slot.disc_return * (!row.done as u8 as f64);
                reward_scale.update(slot.disc_return);
            }
        }

        // Assemble the buffer.
        let mut buffer =
            RolloutBuffer::new(config.ppo.horizon, config.ppo.n_envs, OBS_DIM, ACTION_DIM);
        for (e, slot) in slots.iter().enumerate() {
            for (t, row) in slot.rows.iter().enumerate() {
                buffer.obs[t][e] = row.obs_norm.clone();
                buffer.actions[t][e] = row.action.to_vec();
                buffer.log_probs[t][e] = row.log_prob;
                buffer.rewards[t][e] = row.reward / scale;
                buffer.values[t][e] = row.value;
                buffer.dones[t][e] = row.done;
            }
            buffer.bootstrap[e] = slot.bootstrap;
        }
        // Linear learning-rate schedule.
        let progress = (env_steps as f64 / config.ppo.total_steps as f64).min(1.0);
        let lr_scale = 1.0 + (config.ppo.lr_final_fraction - 1.0) * progress;
        let ppo_cfg = PPOConfig {
            learning_rate: config.ppo.learning_rate * lr_scale,
            ..config.ppo.clone()
        };
        let stats = ppo_update(&mut policy, &mut optimizer, &buffer, &ppo_cfg)?;

        // Episode statistics for this window.
        let mut episodes = 0usize;
        let mut ret_sum = 0.0;
        let mut len_sum = 0usize;
        let mut attempted = 0usize;
        let mut completed = 0usize;
        let mut terminations = TerminationCounts::default();
        for slot in &slots {
            for ep in &slot.finished {
                episodes += 1;
                ret_sum += ep.ret;
                len_sum += ep.len;
                attempted += ep.stunts_attempted;
                completed += ep.stunts_completed;
                if let Some(cause) = ep.termination {
                    terminations.record(cause);
                }
            }
        }

        let mut eval_success = None;
        if config.eval_every_iters > 0 && iteration % config.eval_every_iters == 0 {
            let eval = evaluate(
                &policy,
                &normalizer,
                env_config,
                config.eval_episodes,
                config.ppo.seed ^ 0xEAE1,
            )?;
            eval_success = Some(eval.success_rate);
            if let Some(threshold) = config.success_stop {
                if eval.success_rate >= threshold && eval.stunts_attempted >= config.eval_episodes
                {
                    stopped_early = true;
                }
            }
        }

        let record = MetricsRecord {
            iteration,
            env_steps,
            episodes,
            episode_return_mean: if episodes > 0 { ret_sum / episodes as f64 } else { 0.0 },
            episode_len_mean: if episodes > 0 {
                len_sum as f64 / episodes as f64
            } else {
                0.0
            },
            stunts_attempted: attempted,
            stunts_completed: completed,
            terminations,
            policy_loss: stats.policy_loss,
            value_loss: stats.value_loss,
            entropy: stats.entropy,
            approx_kl: stats.approx_kl,
            clip_fraction: stats.clip_fraction,
            eval_success_rate: eval_success,
        };
        metrics.push(record);

        if let (Some(dir), true) = (
            &config.out_dir,
            config.checkpoint_every_iters > 0 && iteration % config.checkpoint_every_iters == 0,
        ) {
            write_checkpoint(&dir.join(format!("checkpoint_{iteration:05}.bin")), &policy, &normalizer)?;
        }
        if stopped_early {
            break;
        }
    }

    if let Some(dir) = &config.out_dir {
        write_checkpoint(&dir.join("checkpoint_final.bin"), &policy, &normalizer)?;
        let mut log = String::new();
        for record in &metrics {
            log.push_str(&serde_json::to_string(record).expect("metrics serialize"));
            log.push('\n');
        }
        std::fs::write(dir.join("metrics.jsonl"), log)?;
    }

    Ok(TrainResult { policy, normalizer, metrics, env_steps, stopped_early })
}

/// Deterministic-action evaluation over seeded episodes.
pub fn evaluate(
    policy: &Policy,
    normalizer: &RunningNorm,
    env_config: &EnvConfig,
    episodes: usize,
    seed: u64,
) -> Result<EvalMetrics, TrainError> {
    let results: Vec<Result<_, TrainError>> = (0..episodes)
        .into_par_iter()
        .map(|i| {
            let ep_seed = seed.wrapping_add(i as u64);
            let mut env = Env::new(env_config.clone(), ep_seed);
            let mut obs_raw = env.reset(ep_seed).to_array();
            let mut cache = ForwardCache::default();
            let mut obs_norm = vec![0.0; OBS_DIM];
            let mut ep_return = 0.0;
            let mut tracked = 0usize;
            let mut track_err = 0.0;
            let mut landings: Vec<LandingEvent> = Vec::new();
            let termination;
            loop {
                normalizer.normalize(&obs_raw, &mut obs_norm);
                let mean = policy.mean_action(&obs_norm, &mut cache);
                let action = [mean[0], mean[1], mean[2]];
                let (obs, reward, done, info) = env.step(&action)?;
                ep_return += reward;
                if env.mode() == Mode::Stunt && !env.context().progress.finished {
                    let ctx = env.context();
                    let wp = env_config.guideline.waypoints[ctx.progress.active_index].p;
                    let rel = Vec3::new(
                        info.base_pos[0] - ctx.stunt_origin[0],
                        0.0,
                        info.base_pos[1] - ctx.stunt_origin[1],
                    );
                    track_err += rel.distance(wp);
                    tracked += 1;
                }
                if let Some(event) = info.landing {
                    landings.push(event);
                }
                if done {
                    termination = info.termination;
                    break;
                }
                obs_raw = obs.to_array();
            }
            let ctx = env.context();
            let stunt_landings: Vec<f64> = landings
                .iter()
                .filter(|l| l.during_stunt && l.apex_height >= 0.05)
                .map(|l| l.pitch.to_degrees())
                .collect();
            let landing = if stunt_landings.is_empty() {
                None
            } else {
                Some(stunt_landings.iter().sum::<f64>() / stunt_landings.len() as f64)
            };
            Ok((
                ep_return,
                ctx.stunts_attempted,
                ctx.stunts_completed,
                track_err,
                tracked,
                landing,
                termination,
            ))
        })
        .collect();

    let mut metrics = EvalMetrics {
        episodes,
        stunts_attempted: 0,
        stunts_completed: 0,
        success_rate: 0.0,
        completed_per_episode: 0.0,
        attempted_per_episode: 0.0,
        episode_return_mean: 0.0,
        mean_tracking_error: 0.0,
        landing_pitch_deg: Vec::new(),
        median_landing_pitch_deg: None,
        terminations: TerminationCounts::default(),
    };
    let mut ret_sum = 0.0;
    let mut err_sum = 0.0;
    let mut err_count = 0usize;
    for r in results {
        let (ret, attempted, completed, track_err, tracked, landing, termination) = r?;
        ret_sum += ret;
        metrics.stunts_attempted += attempted;
        metrics.stunts_completed += completed;
        err_sum += track_err;
        err_count += tracked;
        if let Some(pitch) = landing {
            metrics.landing_pitch_deg.push(pitch);
        }
        if let Some(cause) = termination {
            metrics.terminations.record(cause);
        }
    }
    metrics.episode_return_mean = ret_sum / episodes.max(1) as f64;
    metrics.success_rate = if metrics.stunts_attempted > 0 {
        metrics.stunts_completed as f64 / metrics.stunts_attempted as f64
    } else {
        0.0
    };
    metrics.completed_per_episode = metrics.stunts_completed as f64 / episodes.max(1) as f64;
    metrics.attempted_per_episode = metrics.stunts_attempted as f64 / episodes.max(1) as f64;
    metrics.mean_tracking_error = if err_count > 0 { err_sum / err_count as f64 } else { 0.0 };
    if !metrics.landing_pitch_deg.is_empty() {
        let mut sorted = metrics.landing_pitch_deg.clone();
        sorted.sort_by(|a, b| a.total_cmp(b));
        metrics.median_landing_pitch_deg = Some(sorted[sorted.len() / 2]);
    }
    Ok(metrics)
}

// ---------------------------------------------------------------------------
// Checkpoints: versioned binary with byte-exact parameter round-trip.
// ---------------------------------------------------------------------------

const CHECKPOINT_MAGIC: &[u8; 4] = b"LLCK";
const CHECKPOINT_VERSION: u32 = 1;

fn write_f64s(w: &mut impl Write, values: &[f64]) -> std::io::Result<()> {
    w.write_all(&(values.len() as u64).to_le_bytes())?;
    for v in values {
        w.write_all(&v.to_le_bytes())?;
    }
    Ok(())
}

fn read_f64s(r: &mut impl Read) -> Result<Vec<f64>, TrainError> {
    let mut len8 = [0u8; 8];
    r.read_exact(&mut len8)?;
    let len = u64::from_le_bytes(len8) as usize;
    if len > 1 << 28 {
        return Err(TrainError::BadCheckpoint("array too large".into()));
    }
    let mut out = Vec::with_capacity(len);
    let mut buf = [0u8; 8];
    for _ in 0..len {
        r.read_exact(&mut buf)?;
        out.push(f64::from_le_bytes(buf));
    }
    Ok(out)
}

fn write_usizes(w: &mut impl Write, values: &[usize]) -> std::io::Result<()> {
    w.write_all(&(values.len() as u64).to_le_bytes())?;
    for v in values {
        w.write_all(&(*v as u64).to_le_bytes())?;
    }
    Ok(())
}

fn read_usizes(r: &mut impl Read) -> Result<Vec<usize>, TrainError> {
    let mut len8 = [0u8; 8];
    r.read_exact(&mut len8)?;
    let len = u64::from_le_bytes(len8) as usize;
    if len > 1 << 16 {
        return Err(TrainError::BadCheckpoint("header too large".into()));
    }
    let mut out = Vec::with_capacity(len);
    for _ in 0..len {
        r.read_exact(&mut len8)?;
        out.push(u64::from_le_bytes(len8) as usize);
    }
    Ok(out)
}

fn write_mlp(w: &mut impl Write, mlp: &super::net::Mlp) -> std::io::Result<()> {
    write_usizes(w, &mlp.sizes)?;
    for layer in &mlp.weights {
        write_f64s(w, layer)?;
    }
    for layer in &mlp.biases {
        write_f64s(w, layer)?;
    }
    Ok(())
}

fn read_mlp(r: &mut impl Read) -> Result<super::net::Mlp, TrainError> {
    let sizes = read_usizes(r)?;
    if sizes.len() < 2 {
        return Err(TrainError::BadCheckpoint("mlp needs at least two sizes".into()));
    }
    let layers = sizes.len() - 1;
    let mut weights = Vec::with_capacity(layers);
    for _ in 0..layers {
        weights.push(read_f64s(r)?);
    }
    let mut biases = Vec::with_capacity(layers);
    for _ in 0..layers {
        biases.push(read_f64s(r)?);
    }
    for l in 0..layers {
        if weights[l].len() != sizes[l] * sizes[l + 1] || biases[l].len() != sizes[l + 1] {
            return Err(TrainError::BadCheckpoint("layer shape mismatch".into()));
        }
    }
    Ok(super::net::Mlp { sizes, weights, biases })
}

/// Writes a policy plus normalizer checkpoint.
pub fn write_checkpoint(
    path: &Path,
    policy: &Policy,
    normalizer: &RunningNorm,
) -> Result<(), TrainError> {
    let mut w = std::io::BufWriter::new(std::fs::File::create(path)?);
    w.write_all(CHECKPOINT_MAGIC)?;
    w.write_all(&CHECKPOINT_VERSION.to_le_bytes())?;
    write_usizes(&mut w, &[policy.spec.obs_dim, policy.spec.act_dim])?;
    write_usizes(&mut w, &policy.spec.hidden)?;
    write_f64s(&mut w, &[policy.spec.init_log_std])?;
    write_f64s(&mut w, &policy.log_std)?;
    write_mlp(&mut w, &policy.actor)?;
    write_mlp(&mut w, &policy.critic)?;
    write_f64s(&mut w, &normalizer.mean)?;
    write_f64s(&mut w, &normalizer.m2)?;
    write_f64s(&mut w, &[normalizer.count])?;
    w.flush()?;
    Ok(())
}

/// Reads a checkpoint back; parameters round-trip bit-exactly.
pub fn read_checkpoint(path: &Path) -> Result<(Policy, RunningNorm), TrainError> {
    let mut r = std::io::BufReader::new(std::fs::File::open(path)?);
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)?;
    if &magic != CHECKPOINT_MAGIC {
        return Err(TrainError::BadCheckpoint("bad magic".into()));
    }
    let mut ver = [0u8; 4];
    r.read_exact(&mut ver)?;
    let version = u32::from_le_bytes(ver);
    if version != CHECKPOINT_VERSION {
        return Err(TrainError::BadCheckpoint(format!("unsupported version {version}")));
    }
    let dims = read_usizes(&mut r)?;
    let hidden = read_usizes(&mut r)?;
    let init_log_std = read_f64s(&mut r)?;
    let log_std = read_f64s(&mut r)?;
    let actor = read_mlp(&mut r)?;
    let critic = read_mlp(&mut r)?;
    let mean = read_f64s(&mut r)?;
    let m2 = read_f64s(&mut r)?;
    let count = read_f64s(&mut r)?;
    if dims.len() != 2 || init_log_std.len() != 1 || count.len() != 1 {
        return Err(TrainError::BadCheckpoint("malformed header".into()));
    }
    let spec = PolicySpec {
        obs_dim: dims[0],
        act_dim: dims[1],
        hidden,
        init_log_std: init_log_std[0],
    };
    if log_std.len() != spec.act_dim {
        return Err(TrainError::BadCheckpoint("log_std length".into()));
    }
    Ok((
        Policy { spec, actor, critic, log_std },
        RunningNorm { mean, m2, count: count[0] },
    ))
}

/// Advantage/return computation exposed for diagnostics on raw buffers.
pub fn compute_gae(
    buffer: &RolloutBuffer,
    gamma: f64,
    lambda: f64,
) -> Result<(Vec<Vec<f64>>, Vec<Vec<f64>>), RlError> {
    gae_advantages(buffer, gamma, lambda)
}

/// Stats type re-exported for metrics consumers.
pub type LossStats = UpdateStats;

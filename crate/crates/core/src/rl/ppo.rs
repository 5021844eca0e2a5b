//! PPO with generalized advantage estimation over the in-repo networks.
//!
//! The policy is a diagonal Gaussian with a state-independent log-std and a
//! separate value network. Updates use the clipped surrogate objective with
//! minibatched epochs, advantage normalization, an entropy bonus, and global
//! gradient-norm clipping. Gradient accumulation is chunked deterministically
//! so results are bit-identical regardless of thread count.

use super::net::{ForwardCache, Mlp, MlpAdam, MlpGrads};
use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

const LOG_2PI: f64 = 1.8378770664093453;

#[derive(Debug, Error)]
pub enum RlError {
    #[error("buffer shape mismatch: {0}")]
    Shape(String),
    #[error("non-finite loss encountered: {0}")]
    NonFiniteLoss(String),
}

/// Network architecture for the actor-critic pair.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PolicySpec {
    pub obs_dim: usize,
    pub act_dim: usize,
    pub hidden: Vec<usize>,
    pub init_log_std: f64,
}

impl PolicySpec {
    pub fn new(obs_dim: usize, act_dim: usize, hidden: Vec<usize>) -> Self {
        PolicySpec { obs_dim, act_dim, hidden, init_log_std: -0.7 }
    }
}

/// Diagonal-Gaussian policy with a value head.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Policy {
    pub spec: PolicySpec,
    pub actor: Mlp,
    pub critic: Mlp,
    pub log_std: Vec<f64>,
}

impl Policy {
    pub fn init(spec: PolicySpec, seed: u64) -> Self {
        use rand::SeedableRng;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut actor_sizes = vec![spec.obs_dim];
        actor_sizes.extend_from_slice(&spec.hidden);
        actor_sizes.push(spec.act_dim);
        let mut critic_sizes = vec![spec.obs_dim];
        critic_sizes.extend_from_slice(&spec.hidden);
        critic_sizes.push(1);
        Policy {
            actor: Mlp::init(&actor_sizes, 0.01, &mut rng),
            critic: Mlp::init(&critic_sizes, 1.0, &mut rng),
            log_std: vec![spec.init_log_std; spec.act_dim],
            spec,
        }
    }

    pub fn mean_action(&self, obs: &[f64], cache: &mut ForwardCache) -> Vec<f64> {
        self.actor.forward(obs, cache);
        self.actor.output(cache).to_vec()
    }

    pub fn value(&self, obs: &[f64], cache: &mut ForwardCache) -> f64 {
        self.critic.forward(obs, cache);
        self.critic.output(cache)[0]
    }

    /// Samples an action, returning `(action, log_prob, value)`.
    pub fn act(
        &self,
        obs: &[f64],
        rng: &mut ChaCha8Rng,
        cache: &mut ForwardCache,
    ) -> (Vec<f64>, f64, f64) {
        self.actor.forward(obs, cache);
        let mean = self.actor.output(cache).to_vec();
        let mut action = vec![0.0; mean.len()];
        for i in 0..mean.len() {
            let z: f64 = rng.sample(StandardNormal);
            action[i] = mean[i] + self.log_std[i].exp() * z;
        }
        let logp = self.log_prob(&mean, &action);
        self.critic.forward(obs, cache);
        let value = self.critic.output(cache)[0];
        (action, logp, value)
    }

    /// Analytic Gaussian log-density of `action` under mean `mean`.
    pub fn log_prob(&self, mean: &[f64], action: &[f64]) -> f64 {
        let mut lp = 0.0;
        for i in 0..mean.len() {
            let std = self.log_std[i].exp();
            let z = (action[i] - mean[i]) / std;
            lp += -0.5 * z * z - self.log_std[i] - 0.5 * LOG_2PI;
        }
        lp
    }

    /// Entropy of the diagonal Gaussian (state independent).
    pub fn entropy(&self) -> f64 {
        self.log_std.iter().map(|ls| ls + 0.5 * (LOG_2PI + 1.0)).sum()
    }
}

/// PPO hyperparameters.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PPOConfig {
    pub gamma: f64,
    pub gae_lambda: f64,
    pub clip_ratio: f64,
    pub learning_rate: f64,
    pub epochs: usize,
    pub minibatch_size: usize,
    pub horizon: usize,
    pub n_envs: usize,
    pub entropy_coef: f64,
    pub value_coef: f64,
    pub grad_clip: f64,
    pub total_steps: usize,
    pub seed: u64,
    /// Learning rate decays linearly to this fraction over total_steps.
    pub lr_final_fraction: f64,
}

impl Default for PPOConfig {
    fn default() -> Self {
        PPOConfig {
            gamma: 0.99,
            gae_lambda: 0.95,
            clip_ratio: 0.2,
            learning_rate: 3e-4,
            epochs: 4,
            minibatch_size: 2048,
            horizon: 512,
            n_envs: 64,
            entropy_coef: 0.003,
            value_coef: 0.5,
            grad_clip: 0.5,
            total_steps: 2_000_000,
            seed: 0,
            lr_final_fraction: 1.0,
        }
    }
}

impl PPOConfig {
    pub fn validate(&self) -> Result<(), RlError> {
        let ok = (0.0..=1.0).contains(&self.gamma)
            && (0.0..=1.0).contains(&self.gae_lambda)
            && self.clip_ratio > 0.0
            && self.horizon > 0
            && self.n_envs > 0
            && self.minibatch_size > 0
            && self.epochs > 0;
        if ok {
            Ok(())
        } else {
            Err(RlError::Shape("invalid PPO configuration".into()))
        }
    }
}

/// Trajectories for one update: `horizon x n_envs` rows plus bootstrap
/// values for the state after the final step.
#[derive(Debug, Clone)]
pub struct RolloutBuffer {
    pub horizon: usize,
    pub n_envs: usize,
    pub obs_dim: usize,
    pub act_dim: usize,
    /// Normalized observations, `[t][env][dim]`.
    pub obs: Vec<Vec<Vec<f64>>>,
    pub actions: Vec<Vec<Vec<f64>>>,
    pub log_probs: Vec<Vec<f64>>,
    pub rewards: Vec<Vec<f64>>,
    pub values: Vec<Vec<f64>>,
    /// True when the transition ended its episode.
    pub dones: Vec<Vec<bool>>,
    /// Value estimate of the observation after the last step, per env.
    pub bootstrap: Vec<f64>,
}

impl RolloutBuffer {
    pub fn new(horizon: usize, n_envs: usize, obs_dim: usize, act_dim: usize) -> Self {
        RolloutBuffer {
            horizon,
            n_envs,
            obs_dim,
            act_dim,
            obs: vec![vec![vec![0.0; obs_dim]; n_envs]; horizon],
            actions: vec![vec![vec![0.0; act_dim]; n_envs]; horizon],
            log_probs: vec![vec![0.0; n_envs]; horizon],
            rewards: vec![vec![0.0; n_envs]; horizon],
            values: vec![vec![0.0; n_envs]; horizon],
            dones: vec![vec![false; n_envs]; horizon],
            bootstrap: vec![0.0; n_envs],
        }
    }

    pub fn len(&self) -> usize {
        self.horizon * self.n_envs
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Generalized advantage estimation:
/// `δ_t = r_t + γ·V_{t+1}·(1−done_t) − V_t`,
/// `A_t = δ_t + γλ·(1−done_t)·A_{t+1}`, returns `A + V`.
pub fn gae_advantages(
    buffer: &RolloutBuffer,
    gamma: f64,
    lambda: f64,
) -> Result<(Vec<Vec<f64>>, Vec<Vec<f64>>), RlError> {
    if buffer.bootstrap.len() != buffer.n_envs {
        return Err(RlError::Shape("bootstrap values missing".into()));
    }
    let mut advantages = vec![vec![0.0; buffer.n_envs]; buffer.horizon];
    let mut returns = vec![vec![0.0; buffer.n_envs]; buffer.horizon];
    for e in 0..buffer.n_envs {
        let mut acc = 0.0;
        for t in (0..buffer.horizon).rev() {
            let not_done = if buffer.dones[t][e] { 0.0 } else { 1.0 };
            let next_value =
                if t + 1 == buffer.horizon { buffer.bootstrap[e] } else { buffer.values[t + 1][e] };
            let delta =
                buffer.rewards[t][e] + gamma * next_value * not_done - buffer.values[t][e];
            acc = delta + gamma * lambda * not_done * acc;
            advantages[t][e] = acc;
            returns[t][e] = acc + buffer.values[t][e];
        }
    }
    Ok((advantages, returns))
}

/// Loss statistics of one update.
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct UpdateStats {
    pub policy_loss: f64,
    pub value_loss: f64,
    pub entropy: f64,
    pub approx_kl: f64,
    pub clip_fraction: f64,
    pub grad_norm: f64,
}

/// Optimizer state for one policy.
pub struct PpoOptimizer {
    actor_adam: MlpAdam,
    critic_adam: MlpAdam,
    log_std_adam: super::net::AdamState,
    step: usize,
}

impl PpoOptimizer {
    pub fn new(policy: &Policy) -> Self {
        PpoOptimizer {
            actor_adam: MlpAdam::new(&policy.actor),
            critic_adam: MlpAdam::new(&policy.critic),
            log_std_adam: super::net::AdamState::new(policy.log_std.len()),
            step: 0,
        }
    }
}

struct GradChunk {
    actor: MlpGrads,
    critic: MlpGrads,
    log_std: Vec<f64>,
    policy_loss: f64,
    value_loss: f64,
    kl: f64,
    clipped: usize,
}

/// Per-sample loss gradient of the clipped PPO objective.
///
/// Returns `(d_loss/d_mean, d_loss/d_log_std, d_loss/d_value, stats)`.
#[allow(clippy::too_many_arguments)]
fn sample_loss_grads(
    policy: &Policy,
    mean: &[f64],
    value: f64,
    action: &[f64],
    old_log_prob: f64,
    advantage: f64,
    ret: f64,
    config: &PPOConfig,
) -> (Vec<f64>, Vec<f64>, f64, f64, f64, f64, bool) {
    let act_dim = mean.len();
    let new_log_prob = policy.log_prob(mean, action);
    let ratio = (new_log_prob - old_log_prob).exp();
    let clipped_ratio = ratio.clamp(1.0 - config.clip_ratio, 1.0 + config.clip_ratio);
    let unclipped = ratio * advantage;
    let clipped = clipped_ratio * advantage;
    let surrogate = unclipped.min(clipped);
    // Gradient of −surrogate w.r.t. the new log-prob: zero when the clipped
    // branch is active and saturated.
    let in_window = ratio > 1.0 - config.clip_ratio && ratio < 1.0 + config.clip_ratio;
    let dsurr_dlp = if unclipped <= clipped || in_window { ratio * advantage } else { 0.0 };
    let dloss_dlp = -dsurr_dlp;

    let mut d_mean = vec![0.0; act_dim];
    let mut d_log_std = vec![0.0; act_dim];
    for i in 0..act_dim {
        let std = policy.log_std[i].exp();
        let z = (action[i] - mean[i]) / std;
        // d lp / d mean_i = z / std; d lp / d log_std_i = z^2 − 1.
        d_mean[i] = dloss_dlp * (z / std);
        d_log_std[i] = dloss_dlp * (z * z - 1.0);
        // Entropy bonus: d(−c_ent·H)/d log_std_i = −c_ent.
        d_log_std[i] -= config.entropy_coef;
    }
    let v_err = value - ret;
    let d_value = config.value_coef * v_err;
    let policy_loss = -surrogate;
    let value_loss = 0.5 * v_err * v_err;
    let kl = old_log_prob - new_log_prob;
    (d_mean, d_log_std, d_value, policy_loss, value_loss, kl, !in_window)
}

/// One PPO update over a collected buffer: normalized advantages, minibatched
/// epochs, clipped surrogate plus value and entropy terms, global
/// gradient-norm clipping.
pub fn ppo_update(
    policy: &mut Policy,
    optimizer: &mut PpoOptimizer,
    buffer: &RolloutBuffer,
    config: &PPOConfig,
) -> Result<UpdateStats, RlError> {
    config.validate()?;
    let (advantages, returns) = gae_advantages(buffer, config.gamma, config.gae_lambda)?;
    let n = buffer.len();
    // Flatten in fixed (t, env) order.
    let mut flat_adv = Vec::with_capacity(n);
    for t in 0..buffer.horizon {
        for e in 0..buffer.n_envs {
            flat_adv.push(advantages[t][e]);
        }
    }
    let mean_adv = flat_adv.iter().sum::<f64>() / n as f64;
    let var_adv =
        flat_adv.iter().map(|a| (a - mean_adv) * (a - mean_adv)).sum::<f64>() / n as f64;
    let std_adv = var_adv.sqrt().max(1e-8);
    for a in flat_adv.iter_mut() {
        *a = (*a - mean_adv) / std_adv;
    }

    use rand::SeedableRng;
    let mut shuffle_rng = ChaCha8Rng::seed_from_u64(config.seed ^ 0xA5A5_5A5A_0000_0000);
    let mut order: Vec<usize> = (0..n).collect();
    let mut stats = UpdateStats::default();
    let mut batches = 0usize;

    for _ in 0..config.epochs {
        order.shuffle(&mut shuffle_rng);
        for chunk in order.chunks(config.minibatch_size.min(n)) {
            // Deterministic parallel accumulation: fixed sub-chunk count,
            // reduced in order.
            const SUB_CHUNKS: usize = 8;
            let sub_size = chunk.len().div_ceil(SUB_CHUNKS);
            let partials: Vec<GradChunk> = chunk
                .par_chunks(sub_size.max(1))
                .map(|ids| {
                    let mut part = GradChunk {
                        actor: policy.actor.zeros_like_grads(),
                        critic: policy.critic.zeros_like_grads(),
                        log_std: vec![0.0; policy.spec.act_dim],
                        policy_loss: 0.0,
                        value_loss: 0.0,
                        kl: 0.0,
                        clipped: 0,
                    };
                    let mut cache_a = ForwardCache::default();
                    let mut cache_c = ForwardCache::default();
                    for &idx in ids {
                        let t = idx / buffer.n_envs;
                        let e = idx % buffer.n_envs;
                        let obs = &buffer.obs[t][e];
                        policy.actor.forward(obs, &mut cache_a);
                        policy.critic.forward(obs, &mut cache_c);
                        let mean = policy.actor.output(&cache_a).to_vec();
                        let value = policy.critic.output(&cache_c)[0];
                        let (d_mean, d_log_std, d_value, pl, vl, kl, was_clipped) =
                            sample_loss_grads(
                                policy,
                                &mean,
                                value,
                                &buffer.actions[t][e],
                                buffer.log_probs[t][e],
                                flat_adv[idx],
                                returns[t][e],
                                config,
                            );
                        policy.actor.backward(&cache_a, &d_mean, &mut part.actor);
                        policy.critic.backward(&cache_c, &[d_value], &mut part.critic);
                        for i in 0..part.log_std.len() {
                            part.log_std[i] += d_log_std[i];
                        }
                        part.policy_loss += pl;
                        part.value_loss += vl;
                        part.kl += kl;
                        part.clipped += was_clipped as usize;
                    }
                    part
                })
                .collect();

            let mut actor_g = policy.actor.zeros_like_grads();
            let mut critic_g = policy.critic.zeros_like_grads();
            let mut log_std_g = vec![0.0; policy.spec.act_dim];
            let mut pl = 0.0;
            let mut vl = 0.0;
            let mut kl = 0.0;
            let mut clipped = 0usize;
            for part in partials {
                actor_g.add(&part.actor);
                critic_g.add(&part.critic);
                for i in 0..log_std_g.len() {
                    log_std_g[i] += part.log_std[i];
                }
                pl += part.policy_loss;
                vl += part.value_loss;
                kl += part.kl;
                clipped += part.clipped;
            }
            let inv = 1.0 / chunk.len() as f64;
            actor_g.scale(inv);
            critic_g.scale(inv);
            log_std_g.iter_mut().for_each(|g| *g *= inv);

            if !(pl.is_finite() && vl.is_finite()) {
                return Err(RlError::NonFiniteLoss(format!(
                    "policy {pl} value {vl} at update step {}",
                    optimizer.step
                )));
            }

            // Global gradient-norm clip.
            let norm = (actor_g.sq_norm()
                + critic_g.sq_norm()
                + log_std_g.iter().map(|g| g * g).sum::<f64>())
            .sqrt();
            if norm > config.grad_clip {
                let s = config.grad_clip / norm;
                actor_g.scale(s);
                critic_g.scale(s);
                log_std_g.iter_mut().for_each(|g| *g *= s);
            }

            optimizer.step += 1;
            optimizer.actor_adam.step(
                &mut policy.actor,
                &actor_g,
                config.learning_rate,
                optimizer.step,
            );
            optimizer.critic_adam.step(
                &mut policy.critic,
                &critic_g,
                config.learning_rate,
                optimizer.step,
            );
            optimizer.log_std_adam.step(
                &mut policy.log_std,
                &log_std_g,
                config.learning_rate,
                optimizer.step,
            );
            for ls in policy.log_std.iter_mut() {
                *ls = ls.clamp(-4.0, 1.0);
            }

            stats.policy_loss += pl * inv;
            stats.value_loss += vl * inv;
            stats.approx_kl += kl * inv;
            stats.clip_fraction += clipped as f64 * inv;
            stats.grad_norm += norm;
            batches += 1;
        }
    }
    let inv_b = 1.0 / batches.max(1) as f64;
    stats.policy_loss *= inv_b;
    stats.value_loss *= inv_b;
    stats.approx_kl *= inv_b;
    stats.clip_fraction *= inv_b;
    stats.grad_norm *= inv_b;
    stats.entropy = policy.entropy();
    Ok(stats)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    fn tiny_policy(seed: u64) -> Policy {
        Policy::init(PolicySpec::new(3, 2, vec![8]), seed)
    }

    #[test]
    fn log_prob_matches_analytic_density() {
        let policy = tiny_policy(1);
        let mean = vec![0.3, -0.2];
        let action = vec![0.5, 0.1];
        let lp = policy.log_prob(&mean, &action);
        let mut expect = 0.0;
        for i in 0..2 {
            let std = policy.log_std[i].exp();
            let var = std * std;
            let diff = action[i] - mean[i];
            expect += -(diff * diff) / (2.0 * var) - (2.0 * std::f64::consts::PI * var).sqrt().ln();
        }
        assert!((lp - expect).abs() < 1e-6, "{lp} vs {expect}");
    }

    #[test]
    fn gae_trivial_and_hand_cases() {
        // All rewards and values zero: advantages all zero.
        let mut buf = RolloutBuffer::new(4, 1, 1, 1);
        let (adv, _) = gae_advantages(&buf, 0.99, 0.95).unwrap();
        assert!(adv.iter().all(|row| row[0] == 0.0));

        // Single step, r = 1, V = 0, gamma = 0.99: A = 1, return = 1.
        let mut buf1 = RolloutBuffer::new(1, 1, 1, 1);
        buf1.rewards[0][0] = 1.0;
        buf1.dones[0][0] = true;
        let (adv, ret) = gae_advantages(&buf1, 0.99, 0.95).unwrap();
        assert_eq!(adv[0][0], 1.0);
        assert_eq!(ret[0][0], 1.0);

        // Two steps r = (1, 1), V = 0, gamma = lambda = 1: A = (2, 1).
        buf = RolloutBuffer::new(2, 1, 1, 1);
        buf.rewards[0][0] = 1.0;
        buf.rewards[1][0] = 1.0;
        buf.dones[1][0] = true;
        let (adv, _) = gae_advantages(&buf, 1.0, 1.0).unwrap();
        assert_eq!(adv[0][0], 2.0);
        assert_eq!(adv[1][0], 1.0);
    }

    /// Brute-force oracle: advantages by direct summation of the
    /// lambda-weighted k-step returns, truncated at episode ends.
    fn gae_oracle(buf: &RolloutBuffer, gamma: f64, lambda: f64) -> Vec<Vec<f64>> {
        let mut adv = vec![vec![0.0; buf.n_envs]; buf.horizon];
        for e in 0..buf.n_envs {
            for t in 0..buf.horizon {
                let mut acc = 0.0;
                let mut coef = 1.0;
                let mut k = t;
                loop {
                    let not_done = if buf.dones[k][e] { 0.0 } else { 1.0 };
                    let next_v = if k + 1 == buf.horizon {
                        buf.bootstrap[e]
                    } else {
                        buf.values[k + 1][e]
                    };
                    let delta = buf.rewards[k][e] + gamma * next_v * not_done - buf.values[k][e];
                    acc += coef * delta;
                    if buf.dones[k][e] || k + 1 == buf.horizon {
                        break;
                    }
                    coef *= gamma * lambda;
                    k += 1;
                }
                adv[t][e] = acc;
            }
        }
        adv
    }

    #[test]
    fn gae_matches_brute_force_oracle_across_gamma_lambda_grid() {
        let mut rng = ChaCha8Rng::seed_from_u64(77);
        let mut buf = RolloutBuffer::new(12, 3, 1, 1);
        for t in 0..12 {
            for e in 0..3 {
                buf.rewards[t][e] = rng.random_range(-1.0..1.0);
                buf.values[t][e] = rng.random_range(-1.0..1.0);
                buf.dones[t][e] = rng.random_range(0.0..1.0) < 0.15;
            }
        }
        for e in 0..3 {
            buf.bootstrap[e] = rng.random_range(-1.0..1.0);
        }
        for gamma in [0.0, 0.95, 1.0] {
            for lambda in [0.0, 0.95, 1.0] {
                let (adv, _) = gae_advantages(&buf, gamma, lambda).unwrap();
                let oracle = gae_oracle(&buf, gamma, lambda);
                for t in 0..12 {
                    for e in 0..3 {
                        assert!(
                            (adv[t][e] - oracle[t][e]).abs() < 1e-12,
                            "gamma {gamma} lambda {lambda} t {t} e {e}: {} vs {}",
                            adv[t][e],
                            oracle[t][e]
                        );
                    }
                }
            }
        }
    }

    #[test]
    fn clip_objective_hand_computed() {
        // ratio 1.5, eps 0.2, positive advantage: objective uses 1.2·A and
        // the gradient through the ratio vanishes.
        let policy = tiny_policy(3);
        let config = PPOConfig { clip_ratio: 0.2, entropy_coef: 0.0, ..PPOConfig::default() };
        let mean = vec![0.0, 0.0];
        let action = vec![0.1, -0.2];
        let lp_new = policy.log_prob(&mean, &action);
        let lp_old = lp_new - 1.5f64.ln(); // ratio = 1.5
        let adv = 2.0;
        let (d_mean, _, _, pl, _, _, was_clipped) =
            sample_loss_grads(&policy, &mean, 0.0, &action, lp_old, adv, 0.0, &config);
        assert!((pl - (-(1.2 * adv))).abs() < 1e-9, "loss {pl}");
        assert!(was_clipped);
        assert!(d_mean.iter().all(|g| *g == 0.0), "clipped gradient must vanish");

        // ratio 1.5 with negative advantage: the unclipped branch is the
        // minimum and gradients flow.
        let (d_mean, _, _, pl, _, _, _) =
            sample_loss_grads(&policy, &mean, 0.0, &action, lp_old, -2.0, 0.0, &config);
        assert!((pl - 3.0).abs() < 1e-9, "loss {pl}");
        assert!(d_mean.iter().any(|g| *g != 0.0));
    }

    #[test]
    fn full_loss_gradient_matches_finite_differences() {
        let mut policy = tiny_policy(9);
        let config = PPOConfig {
            clip_ratio: 0.2,
            entropy_coef: 0.01,
            value_coef: 0.5,
            ..PPOConfig::default()
        };
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let obs: Vec<f64> = (0..3).map(|_| rng.random_range(-1.0..1.0)).collect();
        let action: Vec<f64> = (0..2).map(|_| rng.random_range(-0.5..0.5)).collect();
        let advantage = 0.7;
        let ret = 0.3;
        let mut cache = ForwardCache::default();
        policy.actor.forward(&obs, &mut cache);
        let mean = policy.actor.output(&cache).to_vec();
        // Old log-prob close to new so the sample sits inside the clip window.
        let old_lp = policy.log_prob(&mean, &action) - 0.05;

        let loss_of = |p: &Policy| -> f64 {
            let mut ca = ForwardCache::default();
            p.actor.forward(&obs, &mut ca);
            let mean = p.actor.output(&ca).to_vec();
            let mut cc = ForwardCache::default();
            p.critic.forward(&obs, &mut cc);
            let value = p.critic.output(&cc)[0];
            let lp = p.log_prob(&mean, &action);
            let ratio = (lp - old_lp).exp();
            let clipped = ratio.clamp(0.8, 1.2);
            let surr = (ratio * advantage).min(clipped * advantage);
            let v_err = value - ret;
            -surr + 0.5 * config.value_coef * v_err * v_err - config.entropy_coef * p.entropy()
        };

        // Analytic gradients for this sample.
        let mut cache_a = ForwardCache::default();
        let mut cache_c = ForwardCache::default();
        policy.actor.forward(&obs, &mut cache_a);
        policy.critic.forward(&obs, &mut cache_c);
        let value = policy.critic.output(&cache_c)[0];
        let (d_mean, d_log_std, d_value, ..) = sample_loss_grads(
            &policy,
            &mean,
            value,
            &action,
            old_lp,
            advantage,
            ret,
            &config,
        );
        let mut actor_g = policy.actor.zeros_like_grads();
        policy.actor.backward(&cache_a, &d_mean, &mut actor_g);
        let mut critic_g = policy.critic.zeros_like_grads();
        policy.critic.backward(&cache_c, &[d_value], &mut critic_g);

        let eps = 1e-6;
        for l in 0..policy.actor.weights.len() {
            for idx in (0..policy.actor.weights[l].len()).step_by(5) {
                let orig = policy.actor.weights[l][idx];
                policy.actor.weights[l][idx] = orig + eps;
                let fp = loss_of(&policy);
                policy.actor.weights[l][idx] = orig - eps;
                let fm = loss_of(&policy);
                policy.actor.weights[l][idx] = orig;
                let fd = (fp - fm) / (2.0 * eps);
                let an = actor_g.weights[l][idx];
                let scale = fd.abs().max(an.abs()).max(1e-3);
                assert!((fd - an).abs() / scale <= 1e-4, "actor l{l} i{idx}: {fd} vs {an}");
            }
        }
        for l in 0..policy.critic.weights.len() {
            for idx in (0..policy.critic.weights[l].len()).step_by(5) {
                let orig = policy.critic.weights[l][idx];
                policy.critic.weights[l][idx] = orig + eps;
                let fp = loss_of(&policy);
                policy.critic.weights[l][idx] = orig - eps;
                let fm = loss_of(&policy);
                policy.critic.weights[l][idx] = orig;
                let fd = (fp - fm) / (2.0 * eps);
                let an = critic_g.weights[l][idx];
                let scale = fd.abs().max(an.abs()).max(1e-3);
                assert!((fd - an).abs() / scale <= 1e-4, "critic l{l} i{idx}: {fd} vs {an}");
            }
        }
        for i in 0..2 {
            let orig = policy.log_std[i];
            policy.log_std[i] = orig + eps;
            let fp = loss_of(&policy);
            policy.log_std[i] = orig - eps;
            let fm = loss_of(&policy);
            policy.log_std[i] = orig;
            let fd = (fp - fm) / (2.0 * eps);
            let an = d_log_std[i];
            let scale = fd.abs().max(an.abs()).max(1e-3);
            assert!((fd - an).abs() / scale <= 1e-4, "log_std {i}: {fd} vs {an}");
        }
    }

    #[test]
    fn zero_advantages_leave_policy_gradient_term_inactive() {
        let mut policy = tiny_policy(5);
        let mut optimizer = PpoOptimizer::new(&policy);
        let config = PPOConfig {
            epochs: 1,
            minibatch_size: 8,
            entropy_coef: 0.0,
            ..PPOConfig::default()
        };
        let mut buf = RolloutBuffer::new(4, 2, 3, 2);
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let mut cache = ForwardCache::default();
        for t in 0..4 {
            for e in 0..2 {
                let obs: Vec<f64> = (0..3).map(|_| rng.random_range(-1.0..1.0)).collect();
                let (action, lp, value) = policy.act(&obs, &mut rng, &mut cache);
                buf.obs[t][e] = obs;
                buf.actions[t][e] = action;
                buf.log_probs[t][e] = lp;
                buf.values[t][e] = value;
                buf.rewards[t][e] = 0.0;
                buf.dones[t][e] = false;
            }
        }
        // Rewards are zero and the value targets equal bootstrap = 0, so
        // advantages vanish after normalization guards.
        let stats = ppo_update(&mut policy, &mut optimizer, &buf, &config).unwrap();
        assert!(stats.policy_loss.abs() < 1e-6, "policy loss {}", stats.policy_loss);
    }

    #[test]
    fn repeated_updates_improve_a_bandit_buffer() {
        // One-step bandit: reward equals the first action component; the
        // policy mean should drift upward.
        let mut policy = tiny_policy(21);
        let mut optimizer = PpoOptimizer::new(&policy);
        let config = PPOConfig {
            epochs: 4,
            minibatch_size: 64,
            learning_rate: 3e-3,
            entropy_coef: 0.0,
            ..PPOConfig::default()
        };
        let obs = vec![0.5, -0.3, 0.2];
        let mut cache = ForwardCache::default();
        let mean_before = policy.mean_action(&obs, &mut cache)[0];
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..30 {
            let mut buf = RolloutBuffer::new(1, 64, 3, 2);
            for e in 0..64 {
                let (action, lp, value) = policy.act(&obs, &mut rng, &mut cache);
                buf.obs[0][e] = obs.clone();
                buf.rewards[0][e] = action[0];
                buf.actions[0][e] = action;
                buf.log_probs[0][e] = lp;
                buf.values[0][e] = value;
                buf.dones[0][e] = true;
            }
            ppo_update(&mut policy, &mut optimizer, &buf, &config).unwrap();
        }
        let mean_after = policy.mean_action(&obs, &mut cache)[0];
        assert!(
            mean_after > mean_before + 0.1,
            "policy did not improve: {mean_before} -> {mean_after}"
        );
    }

    #[test]
    fn advantage_normalization_is_exact() {
        let mut buf = RolloutBuffer::new(8, 4, 1, 1);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for t in 0..8 {
            for e in 0..4 {
                buf.rewards[t][e] = rng.random_range(-2.0..2.0);
                buf.values[t][e] = rng.random_range(-1.0..1.0);
            }
        }
        let (advantages, _) = gae_advantages(&buf, 0.99, 0.95).unwrap();
        let flat: Vec<f64> = advantages.iter().flatten().copied().collect();
        let n = flat.len() as f64;
        let mean = flat.iter().sum::<f64>() / n;
        let std =
            (flat.iter().map(|a| (a - mean) * (a - mean)).sum::<f64>() / n).sqrt().max(1e-8);
        let normalized: Vec<f64> = flat.iter().map(|a| (a - mean) / std).collect();
        let m2 = normalized.iter().sum::<f64>() / n;
        let s2 = (normalized.iter().map(|a| (a - m2) * (a - m2)).sum::<f64>() / n).sqrt();
        assert!(m2.abs() <= 1e-6);
        assert!((s2 - 1.0).abs() <= 1e-3);
    }
}

//! Desk-scale PPO with generalized advantage estimation, training the
//! guideline-following policy end-to-end across driving and stunt modes.

pub mod net;
pub mod ppo;
pub mod train;

pub use net::{ForwardCache, Mlp, RunningNorm};
pub use ppo::{
    gae_advantages, ppo_update, PPOConfig, Policy, PolicySpec, PpoOptimizer, RlError,
    RolloutBuffer, UpdateStats,
};
pub use train::{
    evaluate, read_checkpoint, train, write_checkpoint, EvalMetrics, MetricsRecord, TrainConfig,
    TrainError, TrainResult, TerminationCounts,
};

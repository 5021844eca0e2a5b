//! Desk-scale laboratory for line-guided stunt learning on a planar two-mass
//! bicycle model.
//!
//! Users author spatial guidelines (ordered waypoints with cumulative
//! arc-lengths and a reach margin) plus sparse key-orientations; a planar
//! two-mass bicycle plant learns commandable stunt maneuvers with PPO; and a
//! two-phase trajectory optimizer generates physically informed guidelines
//! such as backflips.
//!
//! Modules:
//! - [`geometry`]: Hermite curves, dense sampling, quaternion angles.
//! - [`guideline`]: the task specification, progression, margins,
//!   traveled-distance termination, key-orientation rewards, file format.
//! - [`dynamics`]: the planar two-mass plant with contact and randomization.
//! - [`trajopt`]: two-phase direct collocation and guideline export.
//! - [`env`]: the driving/stunt MDP with reward aggregation.
//! - [`rl`]: PPO with GAE over an in-repo MLP and autodiff.
//! - [`presets`]: the shipped stunts (mini-hop, large-hop, backflip).

pub mod dynamics;
pub mod env;
pub mod geometry;
pub mod guideline;
pub mod presets;
pub mod rl;
pub mod trace;
pub mod trajopt;

pub use geometry::{UnitQuaternion, Vec3};
pub use guideline::{Guideline, GuidelineProgress, KeyOrientationSet};

//! Per-step trace export as CSV with a fixed column order.
//!
//! The dynamics schema covers the plant state and contact readouts; episode
//! traces append the reward-term columns and the base position.

use crate::dynamics::PlanarBikeState;
use crate::env::{Mode, RewardTerms};

/// Column header of the plant-state portion of every trace.
pub const DYNAMICS_TRACE_HEADER: &str =
    "t,x_com,z_com,phi,h,wheel_speed,f_contact,rear_contact,front_contact,mode";

/// Column header of a full episode trace.
pub const EPISODE_TRACE_HEADER: &str = "t,x_com,z_com,phi,h,wheel_speed,f_contact,rear_contact,front_contact,mode,reward,r_line,r_key_pos,r_key_seq,r_lin_vel,r_ang_vel,r_boing_pos,r_action_smooth,r_fork_vel,r_contact_force,r_joint_limits,r_vel_penalty,x_base,z_base";

fn state_fields(t: f64, state: &PlanarBikeState, mode: Mode) -> String {
    format!(
        "{t:.6},{:.6},{:.6},{:.6},{:.6},{:.6},{:.6},{},{},{}",
        state.x_com,
        state.z_com,
        state.phi,
        state.h,
        state.wheel_speed,
        state.f_contact,
        state.rear_contact as u8,
        state.front_contact as u8,
        match mode {
            Mode::Driving => 0,
            Mode::Stunt => 1,
        }
    )
}

/// Accumulates one trace; call [`EpisodeTrace::into_csv`] to finish.
#[derive(Debug, Default, Clone)]
pub struct EpisodeTrace {
    rows: Vec<String>,
}

impl EpisodeTrace {
    pub fn new() -> Self {
        EpisodeTrace { rows: Vec::new() }
    }

    pub fn push(
        &mut self,
        t: f64,
        state: &PlanarBikeState,
        mode: Mode,
        terms: &RewardTerms,
        base: [f64; 2],
    ) {
        let mut row = state_fields(t, state, mode);
        row.push_str(&format!(
            ",{:.6},{:.6},{:.6},{:.6},{:.6},{:.6},{:.6},{:.6},{:.6},{:.6},{:.6},{:.6},{:.6},{:.6}",
            terms.total(),
            terms.line,
            terms.key_position,
            terms.key_sequence,
            terms.lin_vel_track,
            terms.ang_vel_track,
            terms.boing_pos_track,
            terms.action_smoothness,
            terms.fork_velocity,
            terms.contact_force,
            terms.joint_limits,
            terms.velocity_penalty,
            base[0],
            base[1],
        ));
        self.rows.push(row);
    }

    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    pub fn into_csv(self) -> String {
        let mut out = String::from(EPISODE_TRACE_HEADER);
        out.push('\n');
        for row in self.rows {
            out.push_str(&row);
            out.push('\n');
        }
        out
    }
}

/// Writes a plain dynamics trace (no reward columns).
pub fn dynamics_trace_csv(rows: &[(f64, PlanarBikeState, Mode)]) -> String {
    let mut out = String::from(DYNAMICS_TRACE_HEADER);
    out.push('\n');
    for (t, state, mode) in rows {
        out.push_str(&state_fields(*t, state, *mode));
        out.push('\n');
    }
    out
}

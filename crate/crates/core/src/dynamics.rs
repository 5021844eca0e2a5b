//! Planar two-mass bicycle simulation: a chassis with two wheels and a heavy
//! mass module ("boing") riding a prismatic joint through the chassis center
//! of mass, with impulse-based ground contact, PD actuation, and domain
//! randomization.
//!
//! # Coordinates
//!
//! Generalized coordinates are chosen around the system center of mass:
//! `(x_com, z_com, phi, h, wheel_angle)` with world `x` forward and `z` up.
//! Positive pitch `phi` tips the nose down; a backflip sweeps `phi` from 0 to
//! −2π. In these coordinates the mass matrix is diagonal,
//! `diag(M, M, I_c + I_b + mu·h², mu, I_w)` with reduced mass
//! `mu = m_c·m_b / M`, and gravity acts only on `z_com`. Consequences the
//! integrator preserves exactly:
//!
//! - in flight the COM velocity update is literally ballistic, independent of
//!   any internal actuation;
//! - pitch is integrated through its angular momentum `L = I(h)·phidot`, so
//!   total angular momentum about the COM is conserved bit-exactly in flight
//!   (the wheel PD only moves momentum between wheel and body);
//! - the centrifugal force fed into the prismatic joint is constructed so
//!   that its work cancels the `I(h)` convection term algebraically, making
//!   the per-step work-energy ledger an exact identity.
//!
//! Contacts are resolved at the velocity level with accumulated-impulse
//! Gauss-Seidel sweeps: inelastic normal impact, Coulomb friction with
//! stick/slip on the rear wheel (the rolling constraint couples wheel spin to
//! base velocity), and a frictionless normal-only front wheel. Wheel heights
//! may penetrate the ground by a bounded tolerance (roughly one step of
//! approach velocity); contact flags follow that tolerance.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum SimError {
    #[error("simulation fault: {0}")]
    Fault(String),
    #[error("invalid parameter: {0}")]
    BadParams(String),
    #[error("time step {0} outside (0, 0.02]")]
    BadTimeStep(f64),
}

/// Physical and actuation parameters of the planar two-mass model.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PlanarBikeParams {
    pub m_chassis: f64,
    pub m_boing: f64,
    pub inertia_chassis: f64,
    pub inertia_boing: f64,
    pub inertia_wheel: f64,
    pub wheel_radius: f64,
    pub wheelbase: f64,
    /// Axle height below the chassis COM (m).
    pub axle_drop: f64,
    pub h_min: f64,
    pub h_max: f64,
    /// Prismatic joint position gains (N/m, N·s/m).
    pub kp_h: f64,
    pub kd_h: f64,
    /// Wheel velocity gain (N·m·s); the wheel tracks a speed target.
    pub kd_wheel: f64,
    /// Prismatic actuator force limit (N).
    pub force_limit_h: f64,
    /// Wheel motor torque limit (N·m).
    pub torque_limit_wheel: f64,
    /// Wheel spin-rate limit (rad/s), enforced by an internal braking
    /// impulse pair so momentum bookkeeping stays closed.
    pub wheel_speed_limit: f64,
    pub friction_mu: f64,
    pub gravity: f64,
}

impl Default for PlanarBikeParams {
    fn default() -> Self {
        PlanarBikeParams {
            m_chassis: 8.0,
            m_boing: 18.0,
            inertia_chassis: 0.7,
            inertia_boing: 0.4,
            inertia_wheel: 0.06,
            wheel_radius: 0.20,
            wheelbase: 0.8,
            axle_drop: 0.10,
            h_min: 0.08,
            h_max: 0.45,
            kp_h: 6000.0,
            kd_h: 360.0,
            kd_wheel: 2.5,
            force_limit_h: 900.0,
            torque_limit_wheel: 40.0,
            wheel_speed_limit: 60.0,
            friction_mu: 1.0,
            gravity: 9.81,
        }
    }
}

impl PlanarBikeParams {
    pub fn validate(&self) -> Result<(), SimError> {
        let positive = [
            ("m_chassis", self.m_chassis),
            ("m_boing", self.m_boing),
            ("inertia_chassis", self.inertia_chassis),
            ("inertia_boing", self.inertia_boing),
            ("inertia_wheel", self.inertia_wheel),
            ("wheel_radius", self.wheel_radius),
            ("wheelbase", self.wheelbase),
        ];
        for (name, v) in positive {
            if !(v > 0.0) {
                return Err(SimError::BadParams(format!("{name} must be > 0, got {v}")));
            }
        }
        if self.h_min >= self.h_max {
            return Err(SimError::BadParams(format!(
                "h range [{}, {}] empty",
                self.h_min, self.h_max
            )));
        }
        if self.kp_h < 0.0 || self.kd_h < 0.0 || self.kd_wheel < 0.0 {
            return Err(SimError::BadParams("gains must be nonnegative".into()));
        }
        Ok(())
    }

    pub fn total_mass(&self) -> f64 {
        self.m_chassis + self.m_boing
    }

    /// Reduced mass of the prismatic DOF.
    pub fn reduced_mass(&self) -> f64 {
        self.m_chassis * self.m_boing / self.total_mass()
    }

    /// Pitch inertia about the system COM at prismatic extension `h`.
    pub fn body_inertia(&self, h: f64) -> f64 {
        self.inertia_chassis + self.inertia_boing + self.reduced_mass() * h * h
    }

    /// Chassis COM height when both wheels rest on the ground at zero pitch.
    pub fn chassis_rest_height(&self) -> f64 {
        self.wheel_radius + self.axle_drop
    }
}

/// Configuration/velocity state of the planar model.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PlanarBikeState {
    pub x_com: f64,
    pub z_com: f64,
    pub xdot_com: f64,
    pub zdot_com: f64,
    /// Pitch (rad), positive nose-down.
    pub phi: f64,
    pub phidot: f64,
    /// Prismatic extension of the boing along the chassis up-axis (m).
    pub h: f64,
    pub hdot: f64,
    pub wheel_angle: f64,
    /// Absolute wheel spin rate (rad/s); positive rolls forward.
    pub wheel_speed: f64,
    pub rear_contact: bool,
    pub front_contact: bool,
    /// Total ground normal force over the last step (N).
    pub f_contact: f64,
}

/// Joint-space setpoints produced by the policy (already in physical units).
#[derive(Debug, Clone, Copy, Default)]
pub struct JointTargets {
    pub h_target: f64,
    pub wheel_speed_target: f64,
}

/// Per-step bookkeeping used by traces and the energy-audit tests.
#[derive(Debug, Clone, Copy, Default)]
pub struct StepInfo {
    /// Work done by the prismatic actuator, wheel motor, and wheel speed
    /// limiter over the step (J).
    pub w_actuator: f64,
    /// Work done by ground impulses and prismatic hard stops (J); never
    /// positive beyond rounding.
    pub w_contact: f64,
    pub normal_impulse_rear: f64,
    pub normal_impulse_front: f64,
    pub friction_impulse: f64,
    pub applied_force_h: f64,
    pub applied_torque_wheel: f64,
}

/// Forward and up unit vectors of the chassis frame at pitch `phi`.
#[inline]
pub fn frame_axes(phi: f64) -> ([f64; 2], [f64; 2]) {
    let (s, c) = phi.sin_cos();
    ([c, -s], [s, c]) // forward, up
}

impl PlanarBikeState {
    /// Chassis COM position in world coordinates.
    pub fn chassis_pos(&self, params: &PlanarBikeParams) -> [f64; 2] {
        let rho_b = params.m_boing / params.total_mass();
        let (_, up) = frame_axes(self.phi);
        [self.x_com - rho_b * self.h * up[0], self.z_com - rho_b * self.h * up[1]]
    }

    /// Chassis COM velocity in world coordinates.
    pub fn chassis_velocity(&self, params: &PlanarBikeParams) -> [f64; 2] {
        let rho_b = params.m_boing / params.total_mass();
        let (fwd, up) = frame_axes(self.phi);
        [
            self.xdot_com - rho_b * (self.hdot * up[0] + self.h * self.phidot * fwd[0]),
            self.zdot_com - rho_b * (self.hdot * up[1] + self.h * self.phidot * fwd[1]),
        ]
    }

    /// Boing COM position in world coordinates.
    pub fn boing_pos(&self, params: &PlanarBikeParams) -> [f64; 2] {
        let rho_c = params.m_chassis / params.total_mass();
        let (_, up) = frame_axes(self.phi);
        [self.x_com + rho_c * self.h * up[0], self.z_com + rho_c * self.h * up[1]]
    }

    /// World position of a point fixed in the chassis frame.
    pub fn chassis_point(&self, params: &PlanarBikeParams, local: [f64; 2]) -> [f64; 2] {
        let (fwd, up) = frame_axes(self.phi);
        let c = self.chassis_pos(params);
        [
            c[0] + local[0] * fwd[0] + local[1] * up[0],
            c[1] + local[0] * fwd[1] + local[1] * up[1],
        ]
    }

    /// Centers of the rear and front wheels.
    pub fn wheel_centers(&self, params: &PlanarBikeParams) -> ([f64; 2], [f64; 2]) {
        let half = 0.5 * params.wheelbase;
        (
            self.chassis_point(params, [-half, -params.axle_drop]),
            self.chassis_point(params, [half, -params.axle_drop]),
        )
    }

    /// Angular momentum about the system COM (body plus wheel spin).
    pub fn angular_momentum(&self, params: &PlanarBikeParams) -> f64 {
        params.body_inertia(self.h) * self.phidot + params.inertia_wheel * self.wheel_speed
    }

    pub fn is_finite(&self) -> bool {
        [
            self.x_com,
            self.z_com,
            self.xdot_com,
            self.zdot_com,
            self.phi,
            self.phidot,
            self.h,
            self.hdot,
            self.wheel_angle,
            self.wheel_speed,
        ]
        .iter()
        .all(|v| v.is_finite())
    }
}

/// Kinetic and potential energy of a state.
pub fn mechanical_energy(state: &PlanarBikeState, params: &PlanarBikeParams) -> (f64, f64) {
    let m = params.total_mass();
    let mu = params.reduced_mass();
    let ke = 0.5 * m * (state.xdot_com * state.xdot_com + state.zdot_com * state.zdot_com)
        + 0.5 * mu * state.hdot * state.hdot
        + 0.5 * params.body_inertia(state.h) * state.phidot * state.phidot
        + 0.5 * params.inertia_wheel * state.wheel_speed * state.wheel_speed;
    let pe = m * params.gravity * state.z_com;
    (ke, pe)
}

/// State at rest on the ground with the prismatic PD holding `h_target`.
///
/// The returned state is the exact PD equilibrium: the joint sags by
/// `m_boing·g / kp_h` below its target so the actuator carries the boing
/// weight, and the wheels sit at a hair of penetration so contact is active
/// from the first step.
pub fn rest_state(params: &PlanarBikeParams, h_target: f64) -> PlanarBikeState {
    let sag = if params.kp_h > 0.0 { params.m_boing * params.gravity / params.kp_h } else { 0.0 };
    let h = (h_target - sag).clamp(params.h_min, params.h_max);
    let z_chassis = params.chassis_rest_height() - 1e-5;
    let rho_b = params.m_boing / params.total_mass();
    PlanarBikeState {
        x_com: 0.0,
        z_com: z_chassis + rho_b * h,
        xdot_com: 0.0,
        zdot_com: 0.0,
        phi: 0.0,
        phidot: 0.0,
        h,
        hdot: 0.0,
        wheel_angle: 0.0,
        wheel_speed: 0.0,
        rear_contact: true,
        front_contact: true,
        f_contact: params.total_mass() * params.gravity,
    }
}

/// PD control law with output saturation: `kp·(q_des − q) + kd·(qd_des − qd)`
/// clamped to `±limit`.
pub fn pd_torque(q_des: f64, q: f64, qdot_des: f64, qdot: f64, kp: f64, kd: f64, limit: f64) -> f64 {
    (kp * (q_des - q) + kd * (qdot_des - qdot)).clamp(-limit, limit)
}

/// Velocity-level contact row: Jacobian over `(xdot, zdot, phidot, hdot,
/// wheel_speed)`, accumulated impulse, and cached effective mass.
struct ContactRow {
    jac: [f64; 5],
    inv_eff_mass: f64,
    impulse: f64,
}

impl ContactRow {
    fn new(jac: [f64; 5], inv_mass: &[f64; 5]) -> Self {
        let eff: f64 = (0..5).map(|i| jac[i] * jac[i] * inv_mass[i]).sum();
        ContactRow { jac, inv_eff_mass: 1.0 / eff, impulse: 0.0 }
    }

    fn relative_velocity(&self, v: &[f64; 5]) -> f64 {
        (0..5).map(|i| self.jac[i] * v[i]).sum()
    }

    fn apply(&self, v: &mut [f64; 5], inv_mass: &[f64; 5], dp: f64) {
        for i in 0..5 {
            v[i] += inv_mass[i] * self.jac[i] * dp;
        }
    }
}

/// Advances the model by one step of semi-implicit integration with
/// trapezoidal position updates.
///
/// Deterministic: identical `(state, targets, params, dt)` produce a
/// bit-identical successor state.
pub fn step(
    state: &PlanarBikeState,
    targets: JointTargets,
    params: &PlanarBikeParams,
    dt: f64,
) -> Result<(PlanarBikeState, StepInfo), SimError> {
    if !(dt > 0.0 && dt <= 0.02) {
        return Err(SimError::BadTimeStep(dt));
    }
    if !state.is_finite() {
        return Err(SimError::Fault("non-finite state".into()));
    }

    let m_tot = params.total_mass();
    let mu = params.reduced_mass();
    let rho_b = params.m_boing / m_tot;
    let i_body0 = params.body_inertia(state.h);
    let inv_mass = [1.0 / m_tot, 1.0 / m_tot, 1.0 / i_body0, 1.0 / mu, 1.0 / params.inertia_wheel];
    let (fwd, up) = frame_axes(state.phi);

    // Actuator forces from the start-of-step state.
    let h_target = targets.h_target.clamp(params.h_min, params.h_max);
    let f_h = pd_torque(h_target, state.h, 0.0, state.hdot, params.kp_h, params.kd_h, params.force_limit_h);
    let wheel_rel = state.wheel_speed - state.phidot;
    let omega_target = targets.wheel_speed_target.clamp(-params.wheel_speed_limit, params.wheel_speed_limit);
    let tau_m = pd_torque(0.0, 0.0, omega_target, wheel_rel, 0.0, params.kd_wheel, params.torque_limit_wheel);

    // Contact activation: a wheel participates if it would cross the ground
    // within this step at its current approach speed.
    let (rear_c, front_c) = state.wheel_centers(params);
    let half_wb = 0.5 * params.wheelbase;
    let jac_center = |a_x: f64, a_z_eff: f64| -> ([f64; 5], [f64; 5]) {
        // d(point)/dphi = -a_x*up + a_z_eff*fwd with a_z_eff = a_z - rho_b*h.
        let dphi = [-a_x * up[0] + a_z_eff * fwd[0], -a_x * up[1] + a_z_eff * fwd[1]];
        let jx = [1.0, 0.0, dphi[0], -rho_b * up[0], 0.0];
        let jz = [0.0, 1.0, dphi[1], -rho_b * up[1], 0.0];
        (jx, jz)
    };
    let a_z_eff = -params.axle_drop - rho_b * state.h;
    let (rear_jx, rear_jz) = jac_center(-half_wb, a_z_eff);
    let (_, front_jz) = jac_center(half_wb, a_z_eff);
    let mut rear_jt = rear_jx;
    rear_jt[4] = -params.wheel_radius;

    let v0 = [state.xdot_com, state.zdot_com, state.phidot, state.hdot, state.wheel_speed];
    let gap_rear = rear_c[1] - params.wheel_radius;
    let gap_front = front_c[1] - params.wheel_radius;
    let vn_rear: f64 = (0..5).map(|i| rear_jz[i] * v0[i]).sum();
    let vn_front: f64 = (0..5).map(|i| front_jz[i] * v0[i]).sum();
    let rear_active = gap_rear + dt * vn_rear.min(0.0) <= 0.0;
    let front_active = gap_front + dt * vn_front.min(0.0) <= 0.0;

    // Velocity caps that land the prismatic joint exactly on its bounds
    // under the trapezoidal position update.
    let cap_hi = 2.0 * (params.h_max - state.h) / dt - state.hdot;
    let cap_lo = 2.0 * (params.h_min - state.h) / dt - state.hdot;

    // Fixed-point loop over the centrifugal force, which depends on the
    // post-step prismatic extension. Converges in a handful of iterations.
    let mut f_cf = 0.0;
    let mut v = v0;
    let mut rows_snapshot = (0.0, 0.0, 0.0);
    let mut stop_impulse = 0.0;
    let mut limit_impulse = 0.0;
    for _ in 0..30 {
        v = v0;
        // Applied impulses: gravity, actuators, centrifugal coupling.
        v[1] += dt * -params.gravity;
        v[2] += dt * -tau_m * inv_mass[2];
        v[3] += dt * (f_h + f_cf) * inv_mass[3];
        v[4] += dt * tau_m * inv_mass[4];

        // Joint Gauss-Seidel over every velocity constraint with accumulated
        // impulses: contact normals, rear friction, the wheel spin limiter
        // (an internal pair), and the prismatic hard stops.
        let mut rear_n = ContactRow::new(rear_jz, &inv_mass);
        let mut rear_t = ContactRow::new(rear_jt, &inv_mass);
        let mut front_n = ContactRow::new(front_jz, &inv_mass);
        limit_impulse = 0.0;
        stop_impulse = 0.0;
        for _ in 0..80 {
            let mut delta: f64 = 0.0;
            if rear_active {
                let vn = rear_n.relative_velocity(&v);
                let new = (rear_n.impulse - vn * rear_n.inv_eff_mass).max(0.0);
                let dp = new - rear_n.impulse;
                rear_n.impulse = new;
                rear_n.apply(&mut v, &inv_mass, dp);
                delta = delta.max(dp.abs());

                let vt = rear_t.relative_velocity(&v);
                let bound = params.friction_mu * rear_n.impulse;
                let new = (rear_t.impulse - vt * rear_t.inv_eff_mass).clamp(-bound, bound);
                let dp = new - rear_t.impulse;
                rear_t.impulse = new;
                rear_t.apply(&mut v, &inv_mass, dp);
                delta = delta.max(dp.abs());
            }
            if front_active {
                let vn = front_n.relative_velocity(&v);
                let new = (front_n.impulse - vn * front_n.inv_eff_mass).max(0.0);
                let dp = new - front_n.impulse;
                front_n.impulse = new;
                front_n.apply(&mut v, &inv_mass, dp);
                delta = delta.max(dp.abs());
            }
            {
                // Wheel spin limiter: brake toward |wheel_speed| <= limit.
                let free = v[4] - limit_impulse * inv_mass[4];
                let target = free.clamp(-params.wheel_speed_limit, params.wheel_speed_limit);
                let new = (target - free) * params.inertia_wheel;
                let dp = new - limit_impulse;
                limit_impulse = new;
                v[4] += dp * inv_mass[4];
                v[2] -= dp * inv_mass[2];
                delta = delta.max(dp.abs());
            }
            {
                // Prismatic stops: clamp hdot into the cap window.
                let free = v[3] - stop_impulse * inv_mass[3];
                let target = free.clamp(cap_lo.min(cap_hi), cap_hi);
                let new = (target - free) * mu;
                let dp = new - stop_impulse;
                stop_impulse = new;
                v[3] += dp * inv_mass[3];
                delta = delta.max(dp.abs());
            }
            if delta < 1e-14 {
                break;
            }
        }

        rows_snapshot = (rear_n.impulse, front_n.impulse, rear_t.impulse);

        // Centrifugal force consistent with the trapezoidal h update: its
        // work exactly cancels the pitch-inertia convection term.
        let h_new = state.h + 0.5 * dt * (state.hdot + v[3]);
        let l_body = i_body0 * v[2];
        let f_cf_new =
            mu * (state.h + h_new) * l_body * l_body / (2.0 * i_body0 * params.body_inertia(h_new));
        let converged = (f_cf_new - f_cf).abs() <= 1e-12 * (1.0 + f_cf.abs());
        f_cf = f_cf_new;
        if converged {
            break;
        }
    }
    let (p_rear_n, p_front_n, p_rear_t) = rows_snapshot;

    // Trapezoidal position updates.
    let vbar = [
        0.5 * (v0[0] + v[0]),
        0.5 * (v0[1] + v[1]),
        0.5 * (v0[2] + v[2]),
        0.5 * (v0[3] + v[3]),
        0.5 * (v0[4] + v[4]),
    ];
    let h_new = state.h + dt * vbar[3];
    let i_body1 = params.body_inertia(h_new);
    let mut next = PlanarBikeState {
        x_com: state.x_com + dt * vbar[0],
        z_com: state.z_com + dt * vbar[1],
        xdot_com: v[0],
        zdot_com: v[1],
        phi: state.phi + dt * vbar[2],
        // Momentum-preserving remap onto the new pitch inertia.
        phidot: i_body0 * v[2] / i_body1,
        h: h_new,
        hdot: v[3],
        wheel_angle: state.wheel_angle + dt * vbar[4],
        wheel_speed: v[4],
        rear_contact: rear_active && p_rear_n > 0.0,
        front_contact: front_active && p_front_n > 0.0,
        f_contact: (p_rear_n + p_front_n) / dt,
    };
    // Guard against accumulated rounding at the stops.
    next.h = next.h.clamp(params.h_min, params.h_max);

    if !next.is_finite() || next.xdot_com.abs() > 1e6 || next.phidot.abs() > 1e6 {
        return Err(SimError::Fault(format!(
            "instability at x={:.3} z={:.3} phi={:.3}",
            next.x_com, next.z_com, next.phi
        )));
    }

    // Work ledger. Each generalized impulse contributes impulse · vbar, which
    // sums exactly to the kinetic-energy change at frozen inertia; the
    // centrifugal entry cancels the inertia remap by construction.
    let w_motor = dt * tau_m * (vbar[4] - vbar[2]) + limit_impulse * (vbar[4] - vbar[2]);
    let w_act_h = dt * f_h * vbar[3];
    let w_contact_ground = p_rear_n * rear_jz.iter().zip(&vbar).map(|(j, v)| j * v).sum::<f64>()
        + p_front_n * front_jz.iter().zip(&vbar).map(|(j, v)| j * v).sum::<f64>()
        + p_rear_t * rear_jt.iter().zip(&vbar).map(|(j, v)| j * v).sum::<f64>();
    let w_stops = stop_impulse * vbar[3];

    let info = StepInfo {
        w_actuator: w_act_h + w_motor,
        w_contact: w_contact_ground + w_stops,
        normal_impulse_rear: p_rear_n,
        normal_impulse_front: p_front_n,
        friction_impulse: p_rear_t,
        applied_force_h: f_h,
        applied_torque_wheel: tau_m,
    };
    Ok((next, info))
}

// ---------------------------------------------------------------------------
// Domain randomization
// ---------------------------------------------------------------------------

/// Inclusive uniform range.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct UniformRange {
    pub lo: f64,
    pub hi: f64,
}

impl UniformRange {
    pub fn new(lo: f64, hi: f64) -> Self {
        UniformRange { lo, hi }
    }

    pub fn degenerate(v: f64) -> Self {
        UniformRange { lo: v, hi: v }
    }

    pub fn sample(&self, rng: &mut ChaCha8Rng) -> f64 {
        if self.lo == self.hi {
            self.lo
        } else {
            rng.random_range(self.lo..self.hi)
        }
    }
}

/// Randomization ranges for dynamics parameters and observation noise.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RandomizationConfig {
    pub mass_scale: UniformRange,
    pub friction: UniformRange,
    pub motor_strength: UniformRange,
    pub gain_scale: UniformRange,
    /// Actuation delay in control steps, sampled uniformly from 0..=max.
    pub actuation_delay_max: usize,
    pub obs_noise_joint_pos_std: f64,
    pub obs_noise_joint_vel_std: f64,
    pub obs_noise_ang_vel_range: f64,
    pub obs_noise_gravity_range: f64,
    /// Base velocity kick amplitude (m/s), applied at command resamples.
    pub body_velocity_disturbance: f64,
}

impl Default for RandomizationConfig {
    fn default() -> Self {
        RandomizationConfig {
            mass_scale: UniformRange::new(0.9, 1.1),
            friction: UniformRange::new(0.7, 1.5),
            motor_strength: UniformRange::new(0.85, 1.05),
            gain_scale: UniformRange::new(0.85, 1.15),
            actuation_delay_max: 1,
            obs_noise_joint_pos_std: 0.001,
            obs_noise_joint_vel_std: 0.1,
            obs_noise_ang_vel_range: 0.1,
            obs_noise_gravity_range: 0.015,
            body_velocity_disturbance: 0.1,
        }
    }
}

impl RandomizationConfig {
    /// All ranges collapsed: randomization becomes the identity.
    pub fn disabled() -> Self {
        RandomizationConfig {
            mass_scale: UniformRange::degenerate(1.0),
            friction: UniformRange::degenerate(1.0),
            motor_strength: UniformRange::degenerate(1.0),
            gain_scale: UniformRange::degenerate(1.0),
            actuation_delay_max: 0,
            obs_noise_joint_pos_std: 0.0,
            obs_noise_joint_vel_std: 0.0,
            obs_noise_ang_vel_range: 0.0,
            obs_noise_gravity_range: 0.0,
            body_velocity_disturbance: 0.0,
        }
    }

    pub fn validate(&self) -> Result<(), SimError> {
        for (name, r) in [
            ("mass_scale", self.mass_scale),
            ("friction", self.friction),
            ("motor_strength", self.motor_strength),
            ("gain_scale", self.gain_scale),
        ] {
            if r.lo > r.hi {
                return Err(SimError::BadParams(format!("range {name} has lo > hi")));
            }
        }
        Ok(())
    }
}

/// Samples one randomized parameter set. Deterministic per seed.
pub fn apply_randomization(
    params: &PlanarBikeParams,
    config: &RandomizationConfig,
    seed: u64,
) -> PlanarBikeParams {
    use rand::SeedableRng;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mass = config.mass_scale.sample(&mut rng);
    let friction = config.friction.sample(&mut rng);
    let motor = config.motor_strength.sample(&mut rng);
    let gains = config.gain_scale.sample(&mut rng);
    PlanarBikeParams {
        m_chassis: params.m_chassis * mass,
        m_boing: params.m_boing * mass,
        inertia_chassis: params.inertia_chassis * mass,
        inertia_boing: params.inertia_boing * mass,
        inertia_wheel: params.inertia_wheel * mass,
        friction_mu: friction,
        force_limit_h: params.force_limit_h * motor,
        torque_limit_wheel: params.torque_limit_wheel * motor,
        kp_h: params.kp_h * gains,
        kd_h: params.kd_h * gains,
        kd_wheel: params.kd_wheel * gains,
        ..params.clone()
    }
}

/// Samples an actuation delay in control steps.
pub fn sample_actuation_delay(config: &RandomizationConfig, rng: &mut ChaCha8Rng) -> usize {
    if config.actuation_delay_max == 0 {
        0
    } else {
        rng.random_range(0..=config.actuation_delay_max)
    }
}

/// Gaussian sample helper for observation noise channels.
pub fn gaussian_noise(std: f64, rng: &mut ChaCha8Rng) -> f64 {
    if std == 0.0 {
        0.0
    } else {
        Normal::new(0.0, std).expect("valid std").sample(rng)
    }
}

/// Uniform `[-range, range]` sample helper for observation noise channels.
pub fn uniform_noise(range: f64, rng: &mut ChaCha8Rng) -> f64 {
    if range == 0.0 {
        0.0
    } else {
        rng.random_range(-range..range)
    }
}

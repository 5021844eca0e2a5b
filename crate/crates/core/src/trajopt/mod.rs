//! Two-phase (ground-contact, flight) trajectory optimization over the
//! reduced two-mass model, producing backflip and hop guidelines with
//! key-orientations.
//!
//! The plant is the 8-dim state `x = [X, Z, Ẋ, Ż, φ, φ̇, h, ḣ]` (system COM,
//! pitch, prismatic extension) with controls `u = [ḧ, τ, F_r]`: prismatic
//! acceleration, lumped pitch torque about the COM, and the ground reaction
//! force. Contact phases pin the chassis point to the ground at position and
//! velocity level and require `F_r ≥ 0`; flight phases clamp `τ = F_r = 0`,
//! leaving ballistic COM motion and momentum-conserving pitch dynamics.
//!
//! Transcription is trapezoidal direct collocation in the states with one
//! piecewise-constant control per interval and a free duration per phase,
//! solved by the in-repo augmented-Lagrangian method with analytic
//! constraint gradients and a proximal Levenberg-Marquardt feasibility
//! polish. Two structural choices keep the discrete system well posed:
//! interval controls (knot controls give the trapezoidal recursion an
//! alternating null mode that collides with the unilateral reaction bound),
//! and a DAE treatment of contact — the vertical position channel of a
//! contact phase is the algebraic chassis pin itself, while the vertical
//! velocity channel stays dynamic and determines the reaction force.

pub mod solver;

use crate::dynamics::PlanarBikeParams;
use crate::geometry::{quat_from_pitch, DenseSampling, Vec3};
use crate::guideline::{
    build_guideline, Guideline, GuidelineError, OrientationSequence, PositionKeyOrientation,
    DEFAULT_THETA_THRES,
};
use solver::{solve_al, AlConfig, AlProblem};
use thiserror::Error;

pub const STATE_DIM: usize = 8;
pub const CONTROL_DIM: usize = 3;

#[derive(Debug, Error)]
pub enum TrajOptError {
    #[error("problem is malformed: {0}")]
    BadProblem(String),
    #[error("solution shape does not match problem")]
    ShapeMismatch,
    #[error("solution did not converge (max defect {0:.3e})")]
    NotConverged(f64),
    #[error("exported path is degenerate (length {0:.3e} m)")]
    DegenerateExport(f64),
    #[error(transparent)]
    Guideline(#[from] GuidelineError),
    #[error(transparent)]
    Geometry(#[from] crate::geometry::GeometryError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PhaseKind {
    Contact,
    Flight,
}

/// One phase of the transcription: knot count, duration bounds, and box
/// bounds for its states and controls.
#[derive(Debug, Clone)]
pub struct PhaseSpec {
    pub kind: PhaseKind,
    pub knots: usize,
    pub duration_bounds: (f64, f64),
    pub duration_guess: f64,
    pub state_lo: [f64; STATE_DIM],
    pub state_hi: [f64; STATE_DIM],
    pub control_lo: [f64; CONTROL_DIM],
    pub control_hi: [f64; CONTROL_DIM],
    /// Endpoint states used by the deterministic linear initial guess.
    pub guess_start: [f64; STATE_DIM],
    pub guess_end: [f64; STATE_DIM],
    /// Optional mid-phase state the initial guess passes through.
    pub guess_mid: Option<[f64; STATE_DIM]>,
}

/// Fixed state components at the start of the first phase and the end of the
/// last phase.
#[derive(Debug, Clone, Default)]
pub struct BoundarySpec {
    pub initial: [Option<f64>; STATE_DIM],
    pub final_state: [Option<f64>; STATE_DIM],
}

#[derive(Debug, Clone)]
pub struct TrajOptProblem {
    pub name: String,
    pub phases: Vec<PhaseSpec>,
    pub boundary: BoundarySpec,
    pub params: PlanarBikeParams,
    pub w_effort: f64,
    pub w_duration: f64,
}

#[derive(Debug, Clone)]
pub struct PhaseSolution {
    pub kind: PhaseKind,
    pub states: Vec<[f64; STATE_DIM]>,
    /// One control per interval (`states.len() - 1` entries), held constant
    /// across its interval.
    pub controls: Vec<[f64; CONTROL_DIM]>,
    /// Absolute knot times (s), strictly increasing across the solution.
    pub times: Vec<f64>,
}

#[derive(Debug, Clone)]
pub struct TrajOptSolution {
    pub phases: Vec<PhaseSolution>,
    pub durations: Vec<f64>,
    /// Collocation residuals, one per interval per state dimension.
    pub defects: Vec<f64>,
    pub max_defect: f64,
    pub max_constraint_violation: f64,
    pub stationarity: f64,
    pub objective: f64,
    pub converged: bool,
    pub outer_iters: usize,
    pub inner_iters: usize,
}

struct Plant {
    m: f64,
    mu: f64,
    i0: f64,
    g: f64,
    rho_b: f64,
}

impl Plant {
    fn of(params: &PlanarBikeParams) -> Self {
        Plant {
            m: params.total_mass(),
            mu: params.reduced_mass(),
            i0: params.inertia_chassis + params.inertia_boing,
            g: params.gravity,
            rho_b: params.m_boing / params.total_mass(),
        }
    }

    fn f(&self, x: &[f64], u: &[f64]) -> [f64; STATE_DIM] {
        let (h, hd, w) = (x[6], x[7], x[5]);
        let d = self.i0 + self.mu * h * h;
        [
            x[2],
            x[3],
            0.0,
            u[2] / self.m - self.g,
            x[5],
            (u[1] - 2.0 * self.mu * h * hd * w) / d,
            x[7],
            u[0],
        ]
    }

    /// Accumulates `Aᵀw` and `Bᵀw` for the dynamics Jacobians at `(x, u)`.
    fn jac_t_accumulate(
        &self,
        x: &[f64],
        u: &[f64],
        w: &[f64; STATE_DIM],
        at_w: &mut [f64; STATE_DIM],
        bt_w: &mut [f64; CONTROL_DIM],
    ) {
        let (h, hd, om) = (x[6], x[7], x[5]);
        let d = self.i0 + self.mu * h * h;
        at_w[2] += w[0];
        at_w[3] += w[1];
        at_w[5] += w[4];
        at_w[7] += w[6];
        let num = u[1] - 2.0 * self.mu * h * hd * om;
        at_w[5] += w[5] * (-2.0 * self.mu * h * hd / d);
        at_w[6] += w[5] * ((-2.0 * self.mu * hd * om * d - num * 2.0 * self.mu * h) / (d * d));
        at_w[7] += w[5] * (-2.0 * self.mu * h * om / d);
        bt_w[0] += w[7];
        bt_w[1] += w[5] / d;
        bt_w[2] += w[3] / self.m;
    }

    /// Chassis pin residuals at a contact knot: position and velocity of the
    /// ground point.
    fn pin(&self, x: &[f64]) -> [f64; 2] {
        let (phi, om, h, hd) = (x[4], x[5], x[6], x[7]);
        [
            x[1] - self.rho_b * h * phi.cos(),
            x[3] - self.rho_b * (hd * phi.cos() - h * om * phi.sin()),
        ]
    }

    fn pin_grad_accumulate(&self, x: &[f64], w: &[f64; 2], grad: &mut [f64; STATE_DIM]) {
        let (phi, om, h, hd) = (x[4], x[5], x[6], x[7]);
        let (s, c) = phi.sin_cos();
        grad[1] += w[0];
        grad[4] += w[0] * self.rho_b * h * s;
        grad[6] += w[0] * (-self.rho_b * c);
        grad[3] += w[1];
        grad[4] += w[1] * self.rho_b * (hd * s + h * om * c);
        grad[5] += w[1] * self.rho_b * h * s;
        grad[6] += w[1] * self.rho_b * om * s;
        grad[7] += w[1] * (-self.rho_b * c);
    }

    /// Chassis position in world coordinates from a reduced state.
    fn chassis(&self, x: &[f64]) -> [f64; 2] {
        let (s, c) = x[4].sin_cos();
        [x[0] - self.rho_b * x[6] * s, x[1] - self.rho_b * x[6] * c]
    }
}

/// Decision-vector layout: per phase the states then controls, then all
/// durations.
struct Layout {
    state_off: Vec<usize>,
    ctrl_off: Vec<usize>,
    dur_off: usize,
    dim: usize,
}

impl Layout {
    fn of(problem: &TrajOptProblem) -> Self {
        let mut state_off = Vec::new();
        let mut ctrl_off = Vec::new();
        let mut off = 0;
        let knots: Vec<usize> = problem.phases.iter().map(|p| p.knots).collect();
        for k in &knots {
            state_off.push(off);
            off += k * STATE_DIM;
            ctrl_off.push(off);
            off += (k - 1) * CONTROL_DIM;
        }
        let dur_off = off;
        off += knots.len();
        Layout { state_off, ctrl_off, dur_off, dim: off }
    }

    fn x(&self, p: usize, k: usize) -> usize {
        self.state_off[p] + k * STATE_DIM
    }

    fn u(&self, p: usize, k: usize) -> usize {
        self.ctrl_off[p] + k * CONTROL_DIM
    }

    fn t(&self, p: usize) -> usize {
        self.dur_off + p
    }
}

const STATE_SCALES: [f64; STATE_DIM] = [1.0, 1.0, 3.0, 3.0, 6.0, 20.0, 0.3, 3.0];
const CONTROL_SCALES: [f64; CONTROL_DIM] = [40.0, 100.0, 500.0];
/// Tie-breaker on the reaction force, which is otherwise a flat direction.
const REACTION_REG: f64 = 1e-9;
/// Smoothing weight on control differences between adjacent intervals; gives
/// the otherwise nearly flat interval-to-interval modes real curvature.
const CONTROL_SMOOTH: [f64; CONTROL_DIM] = [1e-6, 1e-6, 1e-6];

struct Transcription<'a> {
    problem: &'a TrajOptProblem,
    layout: Layout,
    plant: Plant,
    lo: Vec<f64>,
    hi: Vec<f64>,
    scales: Vec<f64>,
    /// Per-row constraint scales equalizing defect magnitudes across state
    /// dimensions.
    row_scales: Vec<f64>,
    m_constraints: usize,
}

impl<'a> Transcription<'a> {
    fn new(problem: &'a TrajOptProblem) -> Result<Self, TrajOptError> {
        if problem.phases.is_empty() {
            return Err(TrajOptError::BadProblem("no phases".into()));
        }
        for (i, ph) in problem.phases.iter().enumerate() {
            if ph.knots < 3 {
                return Err(TrajOptError::BadProblem(format!("phase {i} has < 3 knots")));
            }
            if !(ph.duration_bounds.0 > 0.0 && ph.duration_bounds.0 <= ph.duration_bounds.1) {
                return Err(TrajOptError::BadProblem(format!("phase {i} duration bounds")));
            }
            for d in 0..STATE_DIM {
                if ph.state_lo[d] > ph.state_hi[d] {
                    return Err(TrajOptError::BadProblem(format!("phase {i} state bounds")));
                }
            }
            for d in 0..CONTROL_DIM {
                if ph.control_lo[d] > ph.control_hi[d] {
                    return Err(TrajOptError::BadProblem(format!("phase {i} control bounds")));
                }
            }
        }
        let layout = Layout::of(problem);
        let plant = Plant::of(&problem.params);
        let mut lo = vec![0.0; layout.dim];
        let mut hi = vec![0.0; layout.dim];
        let mut scales = vec![1.0; layout.dim];
        for (p, ph) in problem.phases.iter().enumerate() {
            for k in 0..ph.knots {
                for d in 0..STATE_DIM {
                    lo[layout.x(p, k) + d] = ph.state_lo[d];
                    hi[layout.x(p, k) + d] = ph.state_hi[d];
                    scales[layout.x(p, k) + d] = STATE_SCALES[d];
                }
            }
            for k in 0..ph.knots - 1 {
                for d in 0..CONTROL_DIM {
                    lo[layout.u(p, k) + d] = ph.control_lo[d];
                    hi[layout.u(p, k) + d] = ph.control_hi[d];
                    scales[layout.u(p, k) + d] = CONTROL_SCALES[d];
                }
            }
            lo[layout.t(p)] = ph.duration_bounds.0;
            hi[layout.t(p)] = ph.duration_bounds.1;
            scales[layout.t(p)] = 0.5;
        }
        let mut row_scales = Vec::new();
        for ph in &problem.phases {
            for _ in 0..ph.knots - 1 {
                row_scales.extend_from_slice(&STATE_SCALES);
            }
            if ph.kind == PhaseKind::Contact {
                row_scales.push(1.0);
                row_scales.push(3.0);
            }
        }
        for (d, v) in problem.boundary.initial.iter().enumerate() {
            if v.is_some() {
                row_scales.push(STATE_SCALES[d]);
            }
        }
        for (d, v) in problem.boundary.final_state.iter().enumerate() {
            if v.is_some() {
                row_scales.push(STATE_SCALES[d]);
            }
        }
        for _ in 0..problem.phases.len() - 1 {
            row_scales.extend_from_slice(&STATE_SCALES);
        }
        let m = row_scales.len();
        Ok(Transcription { problem, layout, plant, lo, hi, scales, row_scales, m_constraints: m })
    }

    fn initial_guess(&self) -> Vec<f64> {
        let mut z = vec![0.0; self.layout.dim];
        for (p, ph) in self.problem.phases.iter().enumerate() {
            for k in 0..ph.knots {
                let a = k as f64 / (ph.knots - 1) as f64;
                for d in 0..STATE_DIM {
                    z[self.layout.x(p, k) + d] = match &ph.guess_mid {
                        Some(mid) if a < 0.5 => {
                            ph.guess_start[d] * (1.0 - 2.0 * a) + mid[d] * 2.0 * a
                        }
                        Some(mid) => mid[d] * (2.0 - 2.0 * a) + ph.guess_end[d] * (2.0 * a - 1.0),
                        None => ph.guess_start[d] * (1.0 - a) + ph.guess_end[d] * a,
                    };
                }
            }
            for k in 0..ph.knots - 1 {
                for d in 0..CONTROL_DIM {
                    z[self.layout.u(p, k) + d] =
                        0.0f64.clamp(ph.control_lo[d], ph.control_hi[d]);
                }
            }
            z[self.layout.t(p)] = ph.duration_guess;
        }
        z
    }
}

impl AlProblem for Transcription<'_> {
    fn dim(&self) -> usize {
        self.layout.dim
    }

    fn constraint_count(&self) -> usize {
        self.m_constraints
    }

    fn bounds(&self) -> (&[f64], &[f64]) {
        (&self.lo, &self.hi)
    }

    fn scales(&self) -> &[f64] {
        &self.scales
    }

    fn objective(&self, z: &[f64], grad: Option<&mut [f64]>) -> f64 {
        let wq = [self.problem.w_effort, self.problem.w_effort, REACTION_REG];
        let mut obj = 0.0;
        let mut grad = grad;
        for (p, ph) in self.problem.phases.iter().enumerate() {
            let t = z[self.layout.t(p)];
            let kn = (ph.knots - 1) as f64;
            let coef = t / kn;
            let mut effort_sum = 0.0;
            for k in 0..ph.knots - 1 {
                let u = &z[self.layout.u(p, k)..self.layout.u(p, k) + CONTROL_DIM];
                let g0: f64 = (0..CONTROL_DIM).map(|d| wq[d] * u[d] * u[d]).sum();
                effort_sum += g0;
                if let Some(g) = grad.as_deref_mut() {
                    for d in 0..CONTROL_DIM {
                        g[self.layout.u(p, k) + d] += coef * 2.0 * wq[d] * u[d];
                    }
                }
            }
            obj += coef * effort_sum + self.problem.w_duration * t;
            if let Some(g) = grad.as_deref_mut() {
                g[self.layout.t(p)] += effort_sum / kn + self.problem.w_duration;
            }
            for k in 1..ph.knots - 1 {
                for d in 0..CONTROL_DIM {
                    let prev = z[self.layout.u(p, k - 1) + d];
                    let cur = z[self.layout.u(p, k) + d];
                    obj += CONTROL_SMOOTH[d] * (cur - prev) * (cur - prev);
                    if let Some(g) = grad.as_deref_mut() {
                        g[self.layout.u(p, k) + d] += 2.0 * CONTROL_SMOOTH[d] * (cur - prev);
                        g[self.layout.u(p, k - 1) + d] -= 2.0 * CONTROL_SMOOTH[d] * (cur - prev);
                    }
                }
            }
        }
        obj
    }

    fn constraints(&self, z: &[f64], out: &mut [f64]) {
        let mut row = 0;
        for (p, ph) in self.problem.phases.iter().enumerate() {
            let t = z[self.layout.t(p)];
            let dt = t / (ph.knots - 1) as f64;
            let contact = ph.kind == PhaseKind::Contact;
            for k in 0..ph.knots - 1 {
                let x0 = &z[self.layout.x(p, k)..self.layout.x(p, k) + STATE_DIM];
                let x1 = &z[self.layout.x(p, k + 1)..self.layout.x(p, k + 1) + STATE_DIM];
                let u = &z[self.layout.u(p, k)..self.layout.u(p, k) + CONTROL_DIM];
                let f0 = self.plant.f(x0, u);
                let f1 = self.plant.f(x1, u);
                for d in 0..STATE_DIM {
                    out[row] = if contact && d == 1 {
                        // Algebraic channel: the chassis stays pinned.
                        self.plant.pin(x1)[0]
                    } else {
                        x1[d] - x0[d] - 0.5 * dt * (f0[d] + f1[d])
                    };
                    row += 1;
                }
            }
            if contact {
                // Anchor the phase start at position and velocity level.
                let x = &z[self.layout.x(p, 0)..self.layout.x(p, 0) + STATE_DIM];
                let pin = self.plant.pin(x);
                out[row] = pin[0];
                out[row + 1] = pin[1];
                row += 2;
            }
        }
        for (d, v) in self.problem.boundary.initial.iter().enumerate() {
            if let Some(v) = v {
                out[row] = z[self.layout.x(0, 0) + d] - v;
                row += 1;
            }
        }
        let last_p = self.problem.phases.len() - 1;
        let last_k = self.problem.phases[last_p].knots - 1;
        for (d, v) in self.problem.boundary.final_state.iter().enumerate() {
            if let Some(v) = v {
                out[row] = z[self.layout.x(last_p, last_k) + d] - v;
                row += 1;
            }
        }
        for p in 0..self.problem.phases.len() - 1 {
            let k_end = self.problem.phases[p].knots - 1;
            for d in 0..STATE_DIM {
                out[row] = z[self.layout.x(p + 1, 0) + d] - z[self.layout.x(p, k_end) + d];
                row += 1;
            }
        }
        debug_assert_eq!(row, self.m_constraints);
        for (o, s) in out.iter_mut().zip(&self.row_scales) {
            *o /= s;
        }
    }

    fn constraint_grad_accumulate(&self, z: &[f64], weights: &[f64], grad: &mut [f64]) {
        let mut row = 0;
        for (p, ph) in self.problem.phases.iter().enumerate() {
            let t = z[self.layout.t(p)];
            let kn = (ph.knots - 1) as f64;
            let dt = t / kn;
            let contact = ph.kind == PhaseKind::Contact;
            for k in 0..ph.knots - 1 {
                let x0 = &z[self.layout.x(p, k)..self.layout.x(p, k) + STATE_DIM];
                let x1 = &z[self.layout.x(p, k + 1)..self.layout.x(p, k + 1) + STATE_DIM];
                let u = &z[self.layout.u(p, k)..self.layout.u(p, k) + CONTROL_DIM];
                let mut w = [0.0; STATE_DIM];
                for d in 0..STATE_DIM {
                    w[d] = weights[row + d] / self.row_scales[row + d];
                }
                let w_pin = if contact { w[1] } else { 0.0 };
                if contact {
                    w[1] = 0.0;
                }
                // d = x1 − x0 − dt/2 (f0 + f1); scatter wᵀ∂d/∂(·).
                let mut at0 = [0.0; STATE_DIM];
                let mut bt0 = [0.0; CONTROL_DIM];
                let mut at1 = [0.0; STATE_DIM];
                let mut bt1 = [0.0; CONTROL_DIM];
                self.plant.jac_t_accumulate(x0, u, &w, &mut at0, &mut bt0);
                self.plant.jac_t_accumulate(x1, u, &w, &mut at1, &mut bt1);
                for d in 0..STATE_DIM {
                    grad[self.layout.x(p, k) + d] += -w[d] - 0.5 * dt * at0[d];
                    grad[self.layout.x(p, k + 1) + d] += w[d] - 0.5 * dt * at1[d];
                }
                for d in 0..CONTROL_DIM {
                    grad[self.layout.u(p, k) + d] += -0.5 * dt * (bt0[d] + bt1[d]);
                }
                if contact && w_pin != 0.0 {
                    let mut gx = [0.0; STATE_DIM];
                    self.plant.pin_grad_accumulate(x1, &[w_pin, 0.0], &mut gx);
                    for d in 0..STATE_DIM {
                        grad[self.layout.x(p, k + 1) + d] += gx[d];
                    }
                }
                let f0 = self.plant.f(x0, u);
                let f1 = self.plant.f(x1, u);
                let mut dt_grad = 0.0;
                for d in 0..STATE_DIM {
                    dt_grad += -w[d] * (f0[d] + f1[d]);
                }
                grad[self.layout.t(p)] += dt_grad / (2.0 * kn);
                row += STATE_DIM;
            }
            if contact {
                let x = &z[self.layout.x(p, 0)..self.layout.x(p, 0) + STATE_DIM];
                let w: [f64; 2] = [
                    weights[row] / self.row_scales[row],
                    weights[row + 1] / self.row_scales[row + 1],
                ];
                let mut gx = [0.0; STATE_DIM];
                self.plant.pin_grad_accumulate(x, &w, &mut gx);
                for d in 0..STATE_DIM {
                    grad[self.layout.x(p, 0) + d] += gx[d];
                }
                row += 2;
            }
        }
        for (d, v) in self.problem.boundary.initial.iter().enumerate() {
            if v.is_some() {
                grad[self.layout.x(0, 0) + d] += weights[row] / self.row_scales[row];
                row += 1;
            }
        }
        let last_p = self.problem.phases.len() - 1;
        let last_k = self.problem.phases[last_p].knots - 1;
        for (d, v) in self.problem.boundary.final_state.iter().enumerate() {
            if v.is_some() {
                grad[self.layout.x(last_p, last_k) + d] += weights[row] / self.row_scales[row];
                row += 1;
            }
        }
        for p in 0..self.problem.phases.len() - 1 {
            let k_end = self.problem.phases[p].knots - 1;
            for d in 0..STATE_DIM {
                let w = weights[row] / self.row_scales[row];
                grad[self.layout.x(p + 1, 0) + d] += w;
                grad[self.layout.x(p, k_end) + d] -= w;
                row += 1;
            }
        }
    }
}

fn unpack_solution(
    problem: &TrajOptProblem,
    layout: &Layout,
    z: &[f64],
    result: &solver::AlResult,
    defects: Vec<f64>,
    defect_tol: f64,
) -> TrajOptSolution {
    let mut phases = Vec::new();
    let mut t_acc = 0.0;
    let mut durations = Vec::new();
    for (p, ph) in problem.phases.iter().enumerate() {
        let t = z[layout.t(p)];
        let dt = t / (ph.knots - 1) as f64;
        let mut states = Vec::with_capacity(ph.knots);
        let mut controls = Vec::with_capacity(ph.knots - 1);
        let mut times = Vec::with_capacity(ph.knots);
        for k in 0..ph.knots {
            let mut x = [0.0; STATE_DIM];
            x.copy_from_slice(&z[layout.x(p, k)..layout.x(p, k) + STATE_DIM]);
            states.push(x);
            times.push(t_acc + dt * k as f64);
        }
        for k in 0..ph.knots - 1 {
            let mut u = [0.0; CONTROL_DIM];
            u.copy_from_slice(&z[layout.u(p, k)..layout.u(p, k) + CONTROL_DIM]);
            controls.push(u);
        }
        t_acc += t;
        durations.push(t);
        phases.push(PhaseSolution { kind: ph.kind, states, controls, times });
    }
    let max_defect = defects.iter().fold(0.0f64, |a, d| a.max(d.abs()));
    TrajOptSolution {
        phases,
        durations,
        defects,
        max_defect,
        max_constraint_violation: result.max_violation,
        stationarity: result.stationarity,
        objective: result.objective,
        converged: result.converged && max_defect <= defect_tol,
        outer_iters: result.outer_iters,
        inner_iters: result.inner_iters,
    }
}

/// Collocation residuals of a candidate solution against a problem, one
/// value per interval per state dimension. In contact phases the vertical
/// position channel is algebraic (the chassis pin residual); every other
/// channel is the trapezoidal residual.
pub fn dynamics_defects(
    solution: &TrajOptSolution,
    problem: &TrajOptProblem,
) -> Result<Vec<f64>, TrajOptError> {
    if solution.phases.len() != problem.phases.len() {
        return Err(TrajOptError::ShapeMismatch);
    }
    let plant = Plant::of(&problem.params);
    let mut out = Vec::new();
    for (ph_sol, ph) in solution.phases.iter().zip(&problem.phases) {
        if ph_sol.states.len() != ph.knots || ph_sol.controls.len() != ph.knots - 1 {
            return Err(TrajOptError::ShapeMismatch);
        }
    }
    for (p, (ph_sol, ph)) in solution.phases.iter().zip(&problem.phases).enumerate() {
        let dt = solution.durations[p] / (ph.knots - 1) as f64;
        let contact = ph.kind == PhaseKind::Contact;
        for k in 0..ph.knots - 1 {
            let f0 = plant.f(&ph_sol.states[k], &ph_sol.controls[k]);
            let f1 = plant.f(&ph_sol.states[k + 1], &ph_sol.controls[k]);
            for d in 0..STATE_DIM {
                if contact && d == 1 {
                    out.push(plant.pin(&ph_sol.states[k + 1])[0]);
                } else {
                    out.push(
                        ph_sol.states[k + 1][d]
                            - ph_sol.states[k][d]
                            - 0.5 * dt * (f0[d] + f1[d]),
                    );
                }
            }
        }
    }
    Ok(out)
}

/// Max absolute residual per constraint group, for defect reports.
pub fn constraint_report(
    solution: &TrajOptSolution,
    problem: &TrajOptProblem,
) -> Result<Vec<(String, f64)>, TrajOptError> {
    let tr = Transcription::new(problem)?;
    let z = solution_to_vec(problem, solution).ok_or(TrajOptError::ShapeMismatch)?;
    let mut c = vec![0.0; tr.m_constraints];
    tr.constraints(&z, &mut c);
    // Undo row scaling: report raw residuals.
    for (ci, s) in c.iter_mut().zip(&tr.row_scales) {
        *ci *= s;
    }
    let mut report = Vec::new();
    let mut row = 0;
    for (p, ph) in problem.phases.iter().enumerate() {
        let mut groups: [(String, f64); 2] =
            [(format!("phase {p} defects"), 0.0), (format!("phase {p} contact pins"), 0.0)];
        for _ in 0..(ph.knots - 1) * STATE_DIM {
            groups[0].1 = groups[0].1.max(c[row].abs());
            row += 1;
        }
        if ph.kind == PhaseKind::Contact {
            groups[1].1 = groups[1].1.max(c[row].abs());
            groups[1].1 = groups[1].1.max(c[row + 1].abs());
            row += 2;
        }
        report.push(groups[0].clone());
        if ph.kind == PhaseKind::Contact {
            report.push(groups[1].clone());
        }
    }
    let n_boundary = problem.boundary.initial.iter().flatten().count()
        + problem.boundary.final_state.iter().flatten().count();
    let mut b: f64 = 0.0;
    for _ in 0..n_boundary {
        b = b.max(c[row].abs());
        row += 1;
    }
    report.push(("boundary".into(), b));
    let mut cont: f64 = 0.0;
    while row < c.len() {
        cont = cont.max(c[row].abs());
        row += 1;
    }
    report.push(("phase continuity".into(), cont));
    Ok(report)
}

fn solution_to_vec(problem: &TrajOptProblem, solution: &TrajOptSolution) -> Option<Vec<f64>> {
    let layout = Layout::of(problem);
    if solution.phases.len() != problem.phases.len() {
        return None;
    }
    let mut z = vec![0.0; layout.dim];
    for (p, (ph_sol, ph)) in solution.phases.iter().zip(&problem.phases).enumerate() {
        if ph_sol.states.len() != ph.knots {
            return None;
        }
        for k in 0..ph.knots {
            z[layout.x(p, k)..layout.x(p, k) + STATE_DIM].copy_from_slice(&ph_sol.states[k]);
        }
        for k in 0..ph.knots - 1 {
            z[layout.u(p, k)..layout.u(p, k) + CONTROL_DIM].copy_from_slice(&ph_sol.controls[k]);
        }
        z[layout.t(p)] = solution.durations[p];
    }
    Some(z)
}

/// Defect tolerance a solution must satisfy to be flagged converged.
pub const DEFECT_TOL: f64 = 1e-6;

/// Solves the collocation problem with the augmented-Lagrangian method.
///
/// Non-convergence is not an error: the best iterate is returned with
/// `converged = false`.
pub fn solve(
    problem: &TrajOptProblem,
    init_guess: Option<&TrajOptSolution>,
    max_iters: usize,
) -> Result<TrajOptSolution, TrajOptError> {
    let transcription = Transcription::new(problem)?;
    let z0 = match init_guess {
        Some(sol) => {
            solution_to_vec(problem, sol).ok_or(TrajOptError::ShapeMismatch)?
        }
        None => transcription.initial_guess(),
    };
    let config = AlConfig {
        max_outer: max_iters,
        max_inner: 80,
        constraint_tol: 1e-8,
        stationarity_tol: 1e-4,
        rho_init: 100.0,
        rho_max: 1e4,
    };
    let result = solve_al(&transcription, &z0, &config);
    let layout = Layout::of(problem);
    let mut partial = unpack_solution(problem, &layout, &result.z, &result, Vec::new(), DEFECT_TOL);
    let defects = dynamics_defects(&partial, problem)?;
    partial.max_defect = defects.iter().fold(0.0f64, |a, d| a.max(d.abs()));
    partial.converged = result.converged && partial.max_defect <= DEFECT_TOL;
    partial.defects = defects;
    Ok(partial)
}

// ---------------------------------------------------------------------------
// Problem builders
// ---------------------------------------------------------------------------

/// A phase spec with the default desk-scale bounds for the given kind.
pub fn default_phase(kind: PhaseKind, knots: usize, params: &PlanarBikeParams) -> PhaseSpec {
    let h_mid = 0.5 * (params.h_min + params.h_max);
    let rest = rest_reduced_state(params, h_mid);
    PhaseSpec {
        kind,
        knots,
        duration_bounds: (0.2, 1.0),
        duration_guess: 0.5,
        state_lo: [-5.0, -0.5, -15.0, -15.0, -8.0, -60.0, params.h_min, -8.0],
        state_hi: [5.0, 3.0, 15.0, 15.0, 8.0, 60.0, params.h_max, 8.0],
        control_lo: match kind {
            PhaseKind::Contact => [-60.0, -250.0, 0.0],
            PhaseKind::Flight => [-60.0, 0.0, 0.0],
        },
        control_hi: match kind {
            PhaseKind::Contact => [60.0, 250.0, 3000.0],
            PhaseKind::Flight => [60.0, 0.0, 0.0],
        },
        guess_start: rest,
        guess_end: rest,
        guess_mid: None,
    }
}

/// Reduced state at rest on the ground with the given extension.
pub fn rest_reduced_state(params: &PlanarBikeParams, h: f64) -> [f64; STATE_DIM] {
    let rho_b = params.m_boing / params.total_mass();
    [0.0, rho_b * h, 0.0, 0.0, 0.0, 0.0, h, 0.0]
}

/// Single contact phase holding still: the trivial regression problem.
pub fn build_rest_problem(params: &PlanarBikeParams) -> TrajOptProblem {
    let h_mid = 0.5 * (params.h_min + params.h_max);
    let rest = rest_reduced_state(params, h_mid);
    let mut phase = default_phase(PhaseKind::Contact, 8, params);
    phase.duration_bounds = (0.4, 0.6);
    phase.duration_guess = 0.5;
    let mut boundary = BoundarySpec::default();
    for d in [0, 2, 3, 4, 5, 6, 7] {
        boundary.initial[d] = Some(rest[d]);
        boundary.final_state[d] = Some(rest[d]);
    }
    TrajOptProblem {
        name: "rest".into(),
        phases: vec![phase],
        boundary,
        params: params.clone(),
        w_effort: 0.1,
        w_duration: 0.1,
    }
}

/// Pure flight between fixed positions over a fixed duration: the projectile
/// verification problem.
pub fn build_flight_problem(
    params: &PlanarBikeParams,
    start: [f64; 2],
    end: [f64; 2],
    duration: f64,
    knots: usize,
) -> TrajOptProblem {
    let h_mid = 0.5 * (params.h_min + params.h_max);
    let mut phase = default_phase(PhaseKind::Flight, knots, params);
    phase.duration_bounds = (duration, duration);
    phase.duration_guess = duration;
    phase.state_lo[1] = -5.0;
    phase.state_hi[1] = 10.0;
    phase.guess_start = [start[0], start[1], 0.0, 0.0, 0.0, 0.0, h_mid, 0.0];
    phase.guess_end = [end[0], end[1], 0.0, 0.0, 0.0, 0.0, h_mid, 0.0];
    let mut boundary = BoundarySpec::default();
    boundary.initial = [
        Some(start[0]),
        Some(start[1]),
        None,
        None,
        Some(0.0),
        Some(0.0),
        Some(h_mid),
        Some(0.0),
    ];
    boundary.final_state =
        [Some(end[0]), Some(end[1]), None, None, None, None, Some(h_mid), Some(0.0)];
    TrajOptProblem {
        name: "flight".into(),
        phases: vec![phase],
        boundary,
        params: params.clone(),
        w_effort: 1e-3,
        w_duration: 0.0,
    }
}

/// Launch-contact, flight, landing-contact backflip: pitch sweeps −2π, the
/// stunt starts and ends at rest with mid-range extension.
pub fn build_backflip_problem(params: &PlanarBikeParams, apex_height_hint: f64) -> TrajOptProblem {
    use std::f64::consts::PI;
    let h_mid = 0.5 * (params.h_min + params.h_max);
    let rest0 = rest_reduced_state(params, h_mid);
    let mut rest1 = rest0;
    rest1[4] = -2.0 * PI;

    let apex = if apex_height_hint > 0.0 { apex_height_hint.max(0.4) } else { 0.8 };

    let mut launch = default_phase(PhaseKind::Contact, 16, params);
    launch.duration_bounds = (0.15, 1.0);
    launch.duration_guess = 0.4;
    launch.state_lo[4] = -1.0;
    launch.state_hi[4] = 1.0;
    launch.guess_start = rest0;
    launch.guess_end = {
        let mut x = rest0;
        x[3] = 2.2;
        x[4] = -0.2;
        x[5] = -9.0;
        x
    };

    let mut flight = default_phase(PhaseKind::Flight, 20, params);
    flight.duration_bounds = (0.3, 1.4);
    flight.duration_guess = 0.8;
    flight.state_lo[4] = -2.0 * PI - 1.0;
    flight.state_hi[4] = 1.0;
    flight.state_hi[1] = (apex + 1.0).max(3.0);
    flight.guess_start = launch.guess_end;
    flight.guess_end = {
        let mut x = rest1;
        x[3] = -2.2;
        x[4] = -2.0 * PI + 0.2;
        x[5] = -9.0;
        x
    };
    flight.guess_mid = Some([0.0, apex, 0.0, 0.0, -PI, -9.0, params.h_min + 0.02, 0.0]);

    let mut landing = default_phase(PhaseKind::Contact, 30, params);
    landing.duration_bounds = (0.15, 1.2);
    landing.duration_guess = 0.5;
    landing.state_lo[4] = -2.0 * PI - 1.0;
    landing.state_hi[4] = -2.0 * PI + 1.0;
    landing.guess_start = flight.guess_end;
    landing.guess_mid = Some({
        let mut x = rest1;
        x[4] = -2.0 * PI + 0.05;
        x[5] = -3.0;
        x[6] = params.h_min + 0.05;
        x
    });
    landing.guess_end = rest1;

    let mut boundary = BoundarySpec::default();
    for d in [0, 2, 3, 4, 5, 6, 7] {
        boundary.initial[d] = Some(rest0[d]);
    }
    for d in [2, 3, 4, 5, 6, 7] {
        boundary.final_state[d] = Some(rest1[d]);
    }

    TrajOptProblem {
        name: "backflip".into(),
        phases: vec![launch, flight, landing],
        boundary,
        params: params.clone(),
        w_effort: 1e-3,
        w_duration: 0.5,
    }
}

// ---------------------------------------------------------------------------
// Guideline export
// ---------------------------------------------------------------------------

/// Resamples the base (chassis) path of a converged solution into a guideline
/// and emits the backflip orientation sequence anchored between launch and
/// landing.
pub fn export_guideline(
    solution: &TrajOptSolution,
    params: &PlanarBikeParams,
    k: usize,
    margin: f64,
) -> Result<(Guideline, OrientationSequence), TrajOptError> {
    if !solution.converged {
        return Err(TrajOptError::NotConverged(solution.max_defect));
    }
    let plant = Plant::of(params);
    const SAMPLES_PER_INTERVAL: usize = 40;
    let mut points = Vec::new();
    let mut sample_times = Vec::new();
    for ph in &solution.phases {
        for ki in 0..ph.states.len() - 1 {
            let end = if ki + 2 == ph.states.len() { SAMPLES_PER_INTERVAL + 1 } else { SAMPLES_PER_INTERVAL };
            for s in 0..end {
                let a = s as f64 / SAMPLES_PER_INTERVAL as f64;
                let mut x = [0.0; STATE_DIM];
                for d in 0..STATE_DIM {
                    x[d] = ph.states[ki][d] * (1.0 - a) + ph.states[ki + 1][d] * a;
                }
                let c = plant.chassis(&x);
                points.push(c);
                sample_times.push(ph.times[ki] * (1.0 - a) + ph.times[ki + 1] * a);
            }
        }
    }
    let origin = points[0];
    let polyline: Vec<Vec3> =
        points.iter().map(|p| Vec3::new(p[0] - origin[0], 0.0, p[1] - origin[1])).collect();
    let sampling = DenseSampling::from_polyline(polyline)?;
    let total = sampling.total_length();
    if total < 0.05 {
        return Err(TrajOptError::DegenerateExport(total));
    }
    let gl = build_guideline(&sampling, k, margin)?;

    // Anchor the orientation sequence between the launch (end of the first
    // contact phase) and the landing (start of the last contact phase).
    let launch_time = match solution.phases.iter().position(|p| p.kind == PhaseKind::Flight) {
        Some(fi) => solution.phases[fi].times[0],
        None => sample_times[0],
    };
    let landing_time = match solution.phases.iter().rposition(|p| p.kind == PhaseKind::Flight) {
        Some(fi) => *solution.phases[fi].times.last().unwrap(),
        None => *sample_times.last().unwrap(),
    };
    let arc_at_time = |t: f64| -> f64 {
        let idx = sample_times.partition_point(|&st| st < t).min(sampling.len() - 1);
        sampling.cum_lengths[idx]
    };
    let waypoint_near = |arc: f64| -> usize {
        let mut best = 0;
        let mut best_d = f64::INFINITY;
        for (i, w) in gl.waypoints.iter().enumerate() {
            let d = (w.d - arc).abs();
            if d < best_d {
                best_d = d;
                best = i;
            }
        }
        best
    };
    let mut start_idx = waypoint_near(arc_at_time(launch_time));
    let mut end_idx = waypoint_near(arc_at_time(landing_time));
    if start_idx >= end_idx {
        start_idx = 0;
        end_idx = gl.len() - 1;
    }
    let start = PositionKeyOrientation::new(
        start_idx,
        quat_from_pitch(0.0),
        DEFAULT_THETA_THRES,
        &gl,
    )?;
    let end = PositionKeyOrientation::new(
        end_idx,
        quat_from_pitch(-2.0 * std::f64::consts::PI),
        DEFAULT_THETA_THRES,
        &gl,
    )?;
    let intermediates = vec![
        quat_from_pitch(-90f64.to_radians()),
        quat_from_pitch(-180f64.to_radians()),
        quat_from_pitch(-270f64.to_radians()),
    ];
    let seq = OrientationSequence::new(start, intermediates, end)?;
    Ok((gl, seq))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn params() -> PlanarBikeParams {
        PlanarBikeParams::default()
    }

    fn analytic_flight_solution(
        problem: &TrajOptProblem,
        start: [f64; 2],
        end: [f64; 2],
        duration: f64,
    ) -> TrajOptSolution {
        let p = &problem.params;
        let g = p.gravity;
        let knots = problem.phases[0].knots;
        let h_mid = 0.5 * (p.h_min + p.h_max);
        let vx = (end[0] - start[0]) / duration;
        let vz0 = (end[1] - start[1]) / duration + 0.5 * g * duration;
        let mut states = Vec::new();
        let mut controls = Vec::new();
        let mut times = Vec::new();
        for k in 0..knots {
            let t = duration * k as f64 / (knots - 1) as f64;
            states.push([
                start[0] + vx * t,
                start[1] + vz0 * t - 0.5 * g * t * t,
                vx,
                vz0 - g * t,
                0.0,
                0.0,
                h_mid,
                0.0,
            ]);
            if k + 1 < knots {
                controls.push([0.0, 0.0, 0.0]);
            }
            times.push(t);
        }
        TrajOptSolution {
            phases: vec![PhaseSolution { kind: PhaseKind::Flight, states, controls, times }],
            durations: vec![duration],
            defects: Vec::new(),
            max_defect: 0.0,
            max_constraint_violation: 0.0,
            stationarity: 0.0,
            objective: 0.0,
            converged: true,
            outer_iters: 0,
            inner_iters: 0,
        }
    }

    #[test]
    fn ballistic_arc_has_zero_defects() {
        let p = params();
        let problem = build_flight_problem(&p, [0.0, 1.0], [1.2, 1.0], 0.8, 15);
        let sol = analytic_flight_solution(&problem, [0.0, 1.0], [1.2, 1.0], 0.8);
        let defects = dynamics_defects(&sol, &problem).unwrap();
        let max = defects.iter().fold(0.0f64, |a, d| a.max(d.abs()));
        assert!(max <= 1e-9, "max defect {max}");
    }

    #[test]
    fn static_rest_has_zero_defects_with_weight_reaction() {
        let p = params();
        let problem = build_rest_problem(&p);
        let knots = problem.phases[0].knots;
        let h_mid = 0.5 * (p.h_min + p.h_max);
        let rest = rest_reduced_state(&p, h_mid);
        let weight = p.total_mass() * p.gravity;
        let duration = 0.5;
        let sol = TrajOptSolution {
            phases: vec![PhaseSolution {
                kind: PhaseKind::Contact,
                states: vec![rest; knots],
                controls: vec![[0.0, 0.0, weight]; knots - 1],
                times: (0..knots).map(|k| duration * k as f64 / (knots - 1) as f64).collect(),
            }],
            durations: vec![duration],
            defects: Vec::new(),
            max_defect: 0.0,
            max_constraint_violation: 0.0,
            stationarity: 0.0,
            objective: 0.0,
            converged: true,
            outer_iters: 0,
            inner_iters: 0,
        };
        let defects = dynamics_defects(&sol, &problem).unwrap();
        let max = defects.iter().fold(0.0f64, |a, d| a.max(d.abs()));
        assert!(max <= 1e-9, "max defect {max}");
    }

    #[test]
    fn perturbing_a_feasible_solution_increases_defects() {
        let p = params();
        let problem = build_flight_problem(&p, [0.0, 1.0], [1.2, 1.0], 0.8, 15);
        let sol = analytic_flight_solution(&problem, [0.0, 1.0], [1.2, 1.0], 0.8);
        let base: f64 = dynamics_defects(&sol, &problem)
            .unwrap()
            .iter()
            .map(|d| d * d)
            .sum::<f64>()
            .sqrt();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..10 {
            let mut perturbed = sol.clone();
            for s in perturbed.phases[0].states.iter_mut() {
                for v in s.iter_mut() {
                    *v += rng.random_range(-0.01..0.01);
                }
            }
            let n: f64 = dynamics_defects(&perturbed, &problem)
                .unwrap()
                .iter()
                .map(|d| d * d)
                .sum::<f64>()
                .sqrt();
            assert!(n > base + 1e-6, "perturbed defect {n} vs {base}");
        }
    }

    #[test]
    fn constraint_gradients_match_finite_differences() {
        let p = params();
        let problem = build_backflip_problem(&p, 0.0);
        let tr = Transcription::new(&problem).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let m = tr.constraint_count();
        let n = tr.dim();
        for trial in 0..20 {
            // Random interior point.
            let mut z = tr.initial_guess();
            for i in 0..n {
                let span = (tr.hi[i] - tr.lo[i]).min(2.0 * tr.scales[i]);
                z[i] += rng.random_range(-0.3..0.3) * span * 0.2;
                z[i] = z[i].clamp(tr.lo[i], tr.hi[i]);
            }
            let w: Vec<f64> = (0..m).map(|_| rng.random_range(-1.0..1.0)).collect();
            let mut analytic = vec![0.0; n];
            tr.constraint_grad_accumulate(&z, &w, &mut analytic);
            let mut c = vec![0.0; m];
            let phi = |z: &[f64], c: &mut Vec<f64>| -> f64 {
                tr.constraints(z, c);
                c.iter().zip(&w).map(|(ci, wi)| ci * wi).sum()
            };
            // Spot-check a deterministic spread of coordinates.
            for i in (trial % 7..n).step_by(13) {
                let step = 1e-6 * tr.scales[i];
                let mut zp = z.clone();
                zp[i] += step;
                let fp = phi(&zp, &mut c);
                zp[i] -= 2.0 * step;
                let fm = phi(&zp, &mut c);
                let fd = (fp - fm) / (2.0 * step);
                let scale = analytic[i].abs().max(fd.abs()).max(1e-3);
                assert!(
                    (analytic[i] - fd).abs() / scale <= 1e-4,
                    "coord {i}: analytic {} fd {fd}",
                    analytic[i]
                );
            }
        }
    }

    #[test]
    fn rest_problem_converges_to_zero_controls() {
        let p = params();
        let problem = build_rest_problem(&p);
        let sol = solve(&problem, None, 15).unwrap();
        assert!(sol.converged, "violation {}", sol.max_constraint_violation);
        assert!(sol.outer_iters <= 10, "outer iters {}", sol.outer_iters);
        let weight = p.total_mass() * p.gravity;
        for ph in &sol.phases {
            for u in &ph.controls {
                assert!(u[0].abs() < 5e-3, "hddot {}", u[0]);
                assert!(u[1].abs() < 5e-3, "tau {}", u[1]);
                assert!((u[2] - weight).abs() < 1e-2, "reaction {}", u[2]);
            }
        }
    }

    #[test]
    fn flight_problem_recovers_the_parabola() {
        let p = params();
        let (start, end, duration) = ([0.0, 1.0], [1.2, 1.0], 0.8);
        let problem = build_flight_problem(&p, start, end, duration, 15);
        let sol = solve(&problem, None, 25).unwrap();
        assert!(sol.converged, "violation {}", sol.max_constraint_violation);
        let oracle = analytic_flight_solution(&problem, start, end, duration);
        for (xs, xo) in sol.phases[0].states.iter().zip(&oracle.phases[0].states) {
            assert!((xs[0] - xo[0]).abs() <= 1e-5, "X {} vs {}", xs[0], xo[0]);
            assert!((xs[1] - xo[1]).abs() <= 1e-5, "Z {} vs {}", xs[1], xo[1]);
        }
    }

    #[test]
    fn rest_export_is_rejected_as_degenerate() {
        let p = params();
        let problem = build_rest_problem(&p);
        let sol = solve(&problem, None, 15).unwrap();
        assert!(matches!(
            export_guideline(&sol, &p, 7, 0.3),
            Err(TrajOptError::DegenerateExport(_))
        ));
    }

    #[test]
    fn flight_export_matches_quadrature_arc_length() {
        let p = params();
        let (start, end, duration) = ([0.0, 1.0], [1.2, 1.0], 0.8);
        let problem = build_flight_problem(&p, start, end, duration, 25);
        let sol = solve(&problem, None, 25).unwrap();
        assert!(sol.converged);
        let (gl, seq) = export_guideline(&sol, &p, 10, 0.3).unwrap();
        assert_eq!(gl.len(), 10);
        assert_eq!(seq.intermediates.len(), 3);
        // Quadrature oracle: arc length of the parabola x(t), z(t) using
        // Simpson integration of the speed.
        let g = p.gravity;
        let vx = (end[0] - start[0]) / duration;
        let vz0 = (end[1] - start[1]) / duration + 0.5 * g * duration;
        let speed = |t: f64| (vx * vx + (vz0 - g * t).powi(2)).sqrt();
        let n = 20001;
        let dt = duration / (n - 1) as f64;
        let mut arc = 0.0;
        for i in 0..n - 1 {
            let t0 = i as f64 * dt;
            arc += dt / 6.0 * (speed(t0) + 4.0 * speed(t0 + 0.5 * dt) + speed(t0 + dt));
        }
        assert!(
            (gl.total_length() - arc).abs() <= 1e-3,
            "guideline {} vs quadrature {arc}",
            gl.total_length()
        );
    }

    #[test]
    fn backflip_problem_structure() {
        let p = params();
        let problem = build_backflip_problem(&p, 0.0);
        assert_eq!(problem.phases[0].kind, PhaseKind::Contact);
        assert_eq!(problem.phases[1].kind, PhaseKind::Flight);
        assert_eq!(problem.phases[2].kind, PhaseKind::Contact);
        let sweep = problem.boundary.final_state[4].unwrap() - problem.boundary.initial[4].unwrap();
        assert!((sweep + 2.0 * std::f64::consts::PI).abs() < 1e-12);
        // Zero apex hint keeps bounds well-formed.
        for ph in &problem.phases {
            for d in 0..STATE_DIM {
                assert!(ph.state_lo[d] <= ph.state_hi[d]);
            }
        }
        // Flight phases admit no external forces.
        assert_eq!(problem.phases[1].control_lo[1], 0.0);
        assert_eq!(problem.phases[1].control_hi[1], 0.0);
        assert_eq!(problem.phases[1].control_hi[2], 0.0);
        Transcription::new(&problem).unwrap();
    }
}

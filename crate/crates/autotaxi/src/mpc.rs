//! Decentralized tracking MPC with discrete-time control barrier functions.
//!
//! Each aircraft solves
//!
//! ```text
//! min  Σ_{l<N} ‖x_l − x̄_l‖²_Q + ‖u_l − u_{l−1}‖²_R + ‖x_N − x̄_N‖²_P + μ‖s‖²
//! s.t. x_0 = current state, x_{l+1} = f(x_l, u_l)
//!      |φ_l| ≤ φ_max, |β_l| ≤ β_max, v_min ≤ v_l ≤ v_max
//!      h(x_{l+1}, o_{l+1}) − (1 − γ) h(x_l, o_l) + s_{l,j} ≥ 0,  s ≥ 0
//! ```
//!
//! plus a linear slack term `ρ Σ s` that makes the softening exact.
//!
//! with `h(x, o) = ‖p − o‖² − (r + d_safe)²`. States are decision variables
//! (multiple shooting); every SQP iteration linearizes dynamics and barrier
//! rows around the current iterate and condenses the linearized dynamics
//! out of the QP.

use nalgebra::{DMatrix, DVector, Matrix2, Matrix4, Vector4};
use serde::{Deserialize, Serialize};

use crate::dynamics::{
    clamp_input, dynamics_jacobians, propagate_obstacle, step_dynamics, wrap_angle, AircraftState,
    ControlInput, InputBounds, Obstacle, Point, SpeedLimits,
};
use crate::error::{ensure, Result};
use crate::qp::{solve_qp, QuadProgram};
use crate::trajectory::{sample_reference, PolySpline, ReferenceState};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CbfParams {
    /// Decay rate in (0, 1].
    pub gamma: f64,
    pub d_safe: f64,
}

impl Default for CbfParams {
    fn default() -> Self {
        Self {
            gamma: 0.1,
            d_safe: 0.2,
        }
    }
}

impl CbfParams {
    pub fn validate(&self) -> Result<()> {
        ensure(self.gamma > 0.0 && self.gamma <= 1.0, "gamma", || {
            format!("{} is outside (0, 1]", self.gamma)
        })?;
        ensure(self.d_safe >= 0.0, "d_safe", || format!("{} is negative", self.d_safe))
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MpcWeights {
    pub q: Matrix4<f64>,
    /// Weight on input changes.
    pub r: Matrix2<f64>,
    pub p_term: Matrix4<f64>,
}

impl Default for MpcWeights {
    fn default() -> Self {
        let q = Matrix4::from_diagonal(&Vector4::new(10.0, 10.0, 5.0, 5.0));
        Self {
            q,
            r: Matrix2::from_diagonal(&nalgebra::Vector2::new(0.01, 0.1)),
            p_term: q,
        }
    }
}

impl MpcWeights {
    pub fn from_diagonals(q: [f64; 4], r: [f64; 2], p_term: [f64; 4]) -> Self {
        Self {
            q: Matrix4::from_diagonal(&Vector4::from(q)),
            r: Matrix2::from_diagonal(&nalgebra::Vector2::from(r)),
            p_term: Matrix4::from_diagonal(&Vector4::from(p_term)),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let pd4 = |m: &Matrix4<f64>| (m - m.transpose()).amax() <= 1e-12 && m.cholesky().is_some();
        ensure(pd4(&self.q), "Q", || "must be symmetric positive definite".into())?;
        ensure(pd4(&self.p_term), "P", || "must be symmetric positive definite".into())?;
        ensure(
            (self.r - self.r.transpose()).amax() <= 1e-12 && self.r.cholesky().is_some(),
            "R",
            || "must be symmetric positive definite".into(),
        )
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SqpOptions {
    pub max_iters: usize,
    /// Stop once the applied input step is below this (inf-norm).
    pub step_tol: f64,
    /// Weight `μ` on squared barrier slacks.
    pub slack_penalty: f64,
    /// Weight on the slack sum; keeps slacks at zero whenever the hard
    /// barrier rows are feasible.
    pub slack_linear_penalty: f64,
}

impl Default for SqpOptions {
    fn default() -> Self {
        Self {
            max_iters: 8,
            step_tol: 1e-4,
            slack_penalty: 1e4,
            slack_linear_penalty: 1e4,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MpcConfig {
    pub horizon: usize,
    pub dt: f64,
    /// Wheelbase of the controlled aircraft.
    pub length: f64,
    pub weights: MpcWeights,
    pub cbf: CbfParams,
    pub bounds: InputBounds,
    pub speed_limits: SpeedLimits,
    pub sqp: SqpOptions,
}

impl Default for MpcConfig {
    fn default() -> Self {
        Self {
            horizon: 15,
            dt: 0.1,
            length: 0.6,
            weights: MpcWeights::default(),
            cbf: CbfParams::default(),
            bounds: InputBounds::default(),
            speed_limits: SpeedLimits { min: 0.0, max: 1.0 },
            sqp: SqpOptions::default(),
        }
    }
}

impl MpcConfig {
    pub fn validate(&self) -> Result<()> {
        ensure(self.horizon >= 2, "horizon", || format!("{} < 2", self.horizon))?;
        ensure(self.dt > 0.0, "dt", || format!("{} must be positive", self.dt))?;
        ensure(self.length > 0.0, "length", || format!("{} must be positive", self.length))?;
        ensure(self.sqp.slack_penalty > 0.0, "slack_penalty", || {
            format!("{} must be positive", self.sqp.slack_penalty)
        })?;
        ensure(self.sqp.slack_linear_penalty >= 0.0, "slack_linear_penalty", || {
            format!("{} is negative", self.sqp.slack_linear_penalty)
        })?;
        self.weights.validate()?;
        self.cbf.validate()?;
        self.bounds.validate()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MpcStatus {
    Converged,
    MaxIterations,
    /// No QP could be solved; the caller should brake.
    Failed,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MpcSolution {
    pub inputs: Vec<ControlInput>,
    /// Rollout of `inputs` from the initial state, `N + 1` entries.
    pub states: Vec<AircraftState>,
    /// Tracking cost of the rollout (stage plus terminal terms).
    pub cost: f64,
    /// Barrier slack per `(step, obstacle)` row, step-major.
    pub slacks: Vec<f64>,
    /// Smallest barrier value over the plan and all obstacles.
    pub min_h: f64,
    pub sqp_iterations: usize,
    pub status: MpcStatus,
}

impl MpcSolution {
    pub fn first_input(&self) -> ControlInput {
        self.inputs[0]
    }

    pub fn max_slack(&self) -> f64 {
        self.slacks.iter().copied().fold(0.0, f64::max)
    }

    pub fn is_usable(&self) -> bool {
        self.status != MpcStatus::Failed
    }
}

/// Barrier value `‖p − o‖² − (r + d_safe)²`.
pub fn cbf_h(x: &AircraftState, o_pos: Point, radius: f64, d_safe: f64) -> f64 {
    let dx = x.px - o_pos[0];
    let dy = x.py - o_pos[1];
    let rr = radius + d_safe;
    dx * dx + dy * dy - rr * rr
}

/// `h_next − (1 − γ) h_now`; nonnegative when the discrete barrier condition holds.
pub fn cbf_residual(h_next: f64, h_now: f64, gamma: f64) -> f64 {
    h_next - (1.0 - gamma) * h_now
}

fn state_error(x: &AircraftState, x_ref: &ReferenceState) -> Vector4<f64> {
    Vector4::new(
        x.px - x_ref.px,
        x.py - x_ref.py,
        wrap_angle(x.theta - x_ref.theta),
        x.v - x_ref.v,
    )
}

/// `‖x − x̄‖²_Q + ‖u − u_prev‖²_R`, heading error wrapped.
pub fn stage_cost(
    x: &AircraftState,
    x_ref: &ReferenceState,
    u: &ControlInput,
    u_prev: &ControlInput,
    weights: &MpcWeights,
) -> f64 {
    let e = state_error(x, x_ref);
    let du = u.to_vector() - u_prev.to_vector();
    e.dot(&(weights.q * e)) + du.dot(&(weights.r * du))
}

pub fn terminal_cost(x: &AircraftState, x_ref: &ReferenceState, weights: &MpcWeights) -> f64 {
    let e = state_error(x, x_ref);
    e.dot(&(weights.p_term * e))
}

/// Predicted obstacle disk over the horizon, positions at steps `0..=N`.
#[derive(Debug, Clone, PartialEq)]
pub struct ObstaclePath {
    pub positions: Vec<Point>,
    pub radius: f64,
}

impl ObstaclePath {
    pub fn predict(o: &Obstacle, horizon: usize, dt: f64) -> Self {
        let mut positions = Vec::with_capacity(horizon + 1);
        positions.push(o.position);
        positions.extend(propagate_obstacle(o, horizon, dt));
        Self {
            positions,
            radius: o.radius,
        }
    }
}

/// The receding-horizon program of one aircraft at one time step.
#[derive(Debug, Clone)]
pub struct MpcNlp {
    pub x0: AircraftState,
    /// `N + 1` reference states.
    pub reference: Vec<ReferenceState>,
    pub obstacles: Vec<ObstaclePath>,
    /// Input applied at the previous step, for the rate term at `l = 0`.
    pub u_prev: ControlInput,
    pub config: MpcConfig,
}

/// Linearized subproblem plus the condensed dynamics it was built from.
struct Linearization {
    qp: QuadProgram,
    /// `Δx_l = G_l Δu + c_l` for `l = 1..=N`, stacked.
    g: DMatrix<f64>,
    c: DVector<f64>,
    warm: DVector<f64>,
}

pub fn build_nlp(
    x0: AircraftState,
    reference: Vec<ReferenceState>,
    obstacles: &[Obstacle],
    u_prev: ControlInput,
    config: &MpcConfig,
) -> Result<MpcNlp> {
    config.validate()?;
    ensure(x0.is_finite(), "x0", || format!("non-finite state {x0:?}"))?;
    ensure(reference.len() == config.horizon + 1, "reference", || {
        format!("expected {} states, got {}", config.horizon + 1, reference.len())
    })?;
    Ok(MpcNlp {
        x0,
        reference,
        obstacles: obstacles
            .iter()
            .map(|o| ObstaclePath::predict(o, config.horizon, config.dt))
            .collect(),
        u_prev,
        config: *config,
    })
}

impl MpcNlp {
    pub fn horizon(&self) -> usize {
        self.config.horizon
    }

    pub fn num_inputs(&self) -> usize {
        2 * self.horizon()
    }

    /// Lifted states `x_1..x_N`.
    pub fn num_states(&self) -> usize {
        4 * self.horizon()
    }

    pub fn num_cbf_rows(&self) -> usize {
        self.horizon() * self.obstacles.len()
    }

    pub fn num_slacks(&self) -> usize {
        self.num_cbf_rows()
    }

    pub fn has_terminal_cost(&self) -> bool {
        true
    }

    fn h(&self, x: &AircraftState, step: usize, j: usize) -> f64 {
        let o = &self.obstacles[j];
        cbf_h(x, o.positions[step], o.radius, self.config.cbf.d_safe)
    }

    fn grad_h(&self, x: &AircraftState, step: usize, j: usize) -> Vector4<f64> {
        let o = self.obstacles[j].positions[step];
        Vector4::new(2.0 * (x.px - o[0]), 2.0 * (x.py - o[1]), 0.0, 0.0)
    }

    /// `states[0]` is `x0`; `states.len() == N + 1`.
    pub fn tracking_cost(&self, inputs: &[ControlInput], states: &[AircraftState]) -> f64 {
        let w = &self.config.weights;
        let n = self.horizon();
        let mut cost = 0.0;
        for l in 0..n {
            let prev = if l == 0 { self.u_prev } else { inputs[l - 1] };
            cost += stage_cost(&states[l], &self.reference[l], &inputs[l], &prev, w);
        }
        cost + terminal_cost(&states[n], &self.reference[n], w)
    }

    /// Barrier residuals `h_{l+1} − (1−γ) h_l`, step-major.
    pub fn cbf_rows(&self, states: &[AircraftState]) -> Vec<f64> {
        let gamma = self.config.cbf.gamma;
        let m = self.obstacles.len();
        let mut rows = Vec::with_capacity(self.num_cbf_rows());
        for l in 0..self.horizon() {
            for j in 0..m {
                rows.push(cbf_residual(self.h(&states[l + 1], l + 1, j), self.h(&states[l], l, j), gamma));
            }
        }
        rows
    }

    pub fn rollout(&self, inputs: &[ControlInput]) -> Result<Vec<AircraftState>> {
        let mut states = Vec::with_capacity(inputs.len() + 1);
        states.push(self.x0);
        for u in inputs {
            let next = step_dynamics(states.last().unwrap(), u, self.config.dt, self.config.length)?;
            states.push(next);
        }
        Ok(states)
    }

    fn defect_norm(&self, inputs: &[ControlInput], states: &[AircraftState]) -> Result<f64> {
        let mut total = 0.0;
        for l in 0..self.horizon() {
            let f = step_dynamics(&states[l], &inputs[l], self.config.dt, self.config.length)?;
            let d = state_error(&f, &states[l + 1]);
            total += d.abs().sum();
        }
        Ok(total)
    }

    fn merit(&self, inputs: &[ControlInput], states: &[AircraftState], slacks: &[f64]) -> Result<f64> {
        const PENALTY: f64 = 1e3;
        let mu = self.config.sqp.slack_penalty;
        let rho = self.config.sqp.slack_linear_penalty;
        let violation: f64 = self
            .cbf_rows(states)
            .iter()
            .zip(slacks)
            .map(|(r, s)| (-(r + s)).max(0.0))
            .sum();
        let slack_cost: f64 = slacks.iter().map(|s| mu * s * s + rho * s).sum();
        Ok(self.tracking_cost(inputs, states) + slack_cost + PENALTY * (violation + self.defect_norm(inputs, states)?))
    }

    fn linearize(&self, inputs: &[ControlInput], states: &[AircraftState]) -> Result<Linearization> {
        let cfg = &self.config;
        let n = self.horizon();
        let m = self.obstacles.len();
        let nu = 2 * n;
        let ns = n * m;
        let nz = nu + ns;

        // Condensed linear dynamics.
        let mut g = DMatrix::zeros(4 * n, nu);
        let mut c = DVector::zeros(4 * n);
        let mut g_prev = nalgebra::OMatrix::<f64, nalgebra::U4, nalgebra::Dyn>::zeros(nu);
        let mut c_prev = Vector4::zeros();
        for l in 0..n {
            let (a, b) = dynamics_jacobians(&states[l], &inputs[l], cfg.dt, cfg.length)?;
            let f = step_dynamics(&states[l], &inputs[l], cfg.dt, cfg.length)?;
            let defect = state_error(&f, &states[l + 1]);
            let mut g_next = &a * &g_prev;
            g_next.view_mut((0, 2 * l), (4, 2)).copy_from(&b);
            let c_next = a * c_prev + defect;
            g.view_mut((4 * l, 0), (4, nu)).copy_from(&g_next);
            c.rows_mut(4 * l, 4).copy_from(&c_next);
            g_prev = g_next;
            c_prev = c_next;
        }
        let g_at = |l: usize| g.view((4 * (l - 1), 0), (4, nu));
        let c_at = |l: usize| c.fixed_rows::<4>(4 * (l - 1)).into_owned();

        // Cost.
        let mut h = DMatrix::zeros(nz, nz);
        let mut grad = DVector::zeros(nz);
        {
            let mut huu = DMatrix::zeros(nu, nu);
            let mut gu = DVector::zeros(nu);
            for l in 1..=n {
                let w = if l == n { cfg.weights.p_term } else { cfg.weights.q };
                let gl = g_at(l);
                let e = state_error(&states[l], &self.reference[l]) + c_at(l);
                let wg = w * gl;
                huu += gl.transpose() * &wg;
                gu += gl.transpose() * (w * e);
            }
            for l in 0..n {
                let prev = if l == 0 { self.u_prev } else { inputs[l - 1] };
                let r_bar = inputs[l].to_vector() - prev.to_vector();
                let r = cfg.weights.r;
                // (Δu_l − Δu_{l−1})ᵀ R (...) + 2 r̄ᵀ R (Δu_l − Δu_{l−1})
                for a in 0..2 {
                    for b in 0..2 {
                        huu[(2 * l + a, 2 * l + b)] += r[(a, b)];
                        if l > 0 {
                            huu[(2 * (l - 1) + a, 2 * (l - 1) + b)] += r[(a, b)];
                            huu[(2 * l + a, 2 * (l - 1) + b)] -= r[(a, b)];
                            huu[(2 * (l - 1) + a, 2 * l + b)] -= r[(a, b)];
                        }
                    }
                }
                let rr = r * r_bar;
                for a in 0..2 {
                    gu[2 * l + a] += rr[a];
                    if l > 0 {
                        gu[2 * (l - 1) + a] -= rr[a];
                    }
                }
            }
            h.view_mut((0, 0), (nu, nu)).copy_from(&(huu * 2.0));
            grad.rows_mut(0, nu).copy_from(&(gu * 2.0));
            for i in 0..nu {
                h[(i, i)] += 1e-8;
            }
            for i in nu..nz {
                h[(i, i)] = 2.0 * cfg.sqp.slack_penalty;
                grad[i] = cfg.sqp.slack_linear_penalty;
            }
        }
        // Symmetrize round-off.
        let h = (&h + h.transpose()) * 0.5;

        // Speed rows (two per step) and barrier rows.
        let n_in = 2 * n + ns;
        let mut a_in = DMatrix::zeros(n_in, nz);
        let mut b_in = DVector::zeros(n_in);
        for l in 1..=n {
            let gl = g_at(l);
            let v = states[l].v + c_at(l)[3];
            for k in 0..nu {
                a_in[(2 * (l - 1), k)] = gl[(3, k)];
                a_in[(2 * (l - 1) + 1, k)] = -gl[(3, k)];
            }
            b_in[2 * (l - 1)] = cfg.speed_limits.min - v;
            b_in[2 * (l - 1) + 1] = v - cfg.speed_limits.max;
        }
        let keep = 1.0 - cfg.cbf.gamma;
        for l in 0..n {
            for j in 0..m {
                let row = 2 * n + l * m + j;
                let grad_next = self.grad_h(&states[l + 1], l + 1, j);
                let coeff_next = grad_next.transpose() * g_at(l + 1);
                let mut value = self.h(&states[l + 1], l + 1, j) + grad_next.dot(&c_at(l + 1));
                let mut coeff = coeff_next.clone_owned();
                if l > 0 {
                    let grad_now = self.grad_h(&states[l], l, j);
                    coeff -= grad_now.transpose() * g_at(l) * keep;
                    value -= keep * (self.h(&states[l], l, j) + grad_now.dot(&c_at(l)));
                } else {
                    value -= keep * self.h(&states[0], 0, j);
                }
                for k in 0..nu {
                    a_in[(row, k)] = coeff[k];
                }
                a_in[(row, nu + l * m + j)] = 1.0;
                b_in[row] = -value;
            }
        }

        let mut lower = DVector::zeros(nz);
        let mut upper = DVector::from_element(nz, f64::INFINITY);
        for l in 0..n {
            lower[2 * l] = -cfg.bounds.phi_max - inputs[l].phi;
            upper[2 * l] = cfg.bounds.phi_max - inputs[l].phi;
            lower[2 * l + 1] = -cfg.bounds.beta_max - inputs[l].beta;
            upper[2 * l + 1] = cfg.bounds.beta_max - inputs[l].beta;
        }

        let mut warm = DVector::zeros(nz);
        for r in 0..ns {
            warm[nu + r] = b_in[2 * n + r].max(0.0);
        }
        let qp = QuadProgram::new(h, grad)
            .with_inequalities(a_in, b_in)
            .with_bounds(Some(lower), Some(upper));
        Ok(Linearization { qp, g, c, warm })
    }

    /// Minimal slacks that make the barrier rows hold along `states`.
    pub fn required_slacks(&self, states: &[AircraftState]) -> Vec<f64> {
        self.cbf_rows(states).iter().map(|r| (-r).max(0.0)).collect()
    }
}

fn apply_step(
    nlp: &MpcNlp,
    inputs: &[ControlInput],
    states: &[AircraftState],
    lin: &Linearization,
    z: &DVector<f64>,
    alpha: f64,
) -> (Vec<ControlInput>, Vec<AircraftState>) {
    let bounds = &nlp.config.bounds;
    let new_inputs: Vec<ControlInput> = inputs
        .iter()
        .enumerate()
        .map(|(l, u)| {
            clamp_input(
                &ControlInput::new(u.phi + alpha * z[2 * l], u.beta + alpha * z[2 * l + 1]),
                bounds,
            )
        })
        .collect();
    let dx = &lin.g * z.rows(0, nlp.num_inputs()) + &lin.c;
    let mut new_states = states.to_vec();
    for l in 1..=nlp.horizon() {
        let x = &mut new_states[l];
        x.px += alpha * dx[4 * (l - 1)];
        x.py += alpha * dx[4 * (l - 1) + 1];
        x.theta = wrap_angle(x.theta + alpha * dx[4 * (l - 1) + 2]);
        x.v += alpha * dx[4 * (l - 1) + 3];
    }
    (new_inputs, new_states)
}

/// Runs SQP on `nlp` from an initial input guess.
pub fn solve_nlp(nlp: &MpcNlp, initial: &[ControlInput]) -> Result<MpcSolution> {
    let n = nlp.horizon();
    let nu = nlp.num_inputs();
    let bounds = nlp.config.bounds;
    let mut inputs: Vec<ControlInput> = (0..n)
        .map(|l| clamp_input(initial.get(l).unwrap_or(&ControlInput::ZERO), &bounds))
        .collect();
    let mut states = nlp.rollout(&inputs)?;
    let mut slacks = nlp.required_slacks(&states);
    let mut status = MpcStatus::MaxIterations;
    let mut iterations = 0;
    let mut solved_any = false;

    for _ in 0..nlp.config.sqp.max_iters {
        iterations += 1;
        let lin = nlp.linearize(&inputs, &states)?;
        let sol = solve_qp(&lin.qp, Some(&lin.warm));
        if !sol.is_optimal() {
            log::debug!("SQP subproblem failed: {:?} {:?}", sol.status, sol.diagnostic);
            if !solved_any {
                status = MpcStatus::Failed;
            }
            break;
        }
        solved_any = true;
        let z = sol.z;
        let qp_slacks: Vec<f64> = z.rows(nu, nlp.num_slacks()).iter().map(|s| s.max(0.0)).collect();

        let merit0 = nlp.merit(&inputs, &states, &slacks)?;
        let mut accepted = None;
        let mut alpha = 1.0;
        for _ in 0..6 {
            let (u_try, x_try) = apply_step(nlp, &inputs, &states, &lin, &z, alpha);
            let s_try: Vec<f64> = slacks
                .iter()
                .zip(&qp_slacks)
                .map(|(s, q)| s + alpha * (q - s))
                .collect();
            let merit = nlp.merit(&u_try, &x_try, &s_try)?;
            if merit <= merit0 + 1e-12 * merit0.abs() {
                accepted = Some((u_try, x_try, s_try));
                break;
            }
            alpha *= 0.5;
        }
        let Some((u_new, x_new, s_new)) = accepted else {
            status = MpcStatus::Converged;
            break;
        };
        let step = z.rows(0, nu).amax() * alpha;
        inputs = u_new;
        states = x_new;
        slacks = s_new;
        if step <= nlp.config.sqp.step_tol {
            status = MpcStatus::Converged;
            break;
        }
    }

    let states = nlp.rollout(&inputs)?;
    let slacks = nlp.required_slacks(&states);
    let mut min_h = f64::INFINITY;
    for (l, x) in states.iter().enumerate() {
        for j in 0..nlp.obstacles.len() {
            min_h = min_h.min(nlp.h(x, l, j));
        }
    }
    Ok(MpcSolution {
        cost: nlp.tracking_cost(&inputs, &states),
        inputs,
        states,
        slacks,
        min_h,
        sqp_iterations: iterations,
        status,
    })
}

/// Reference states at `t_now + l·dt` for `l = 0..=N`.
pub fn reference_window(spline: &PolySpline, t_now: f64, horizon: usize, dt: f64) -> Vec<ReferenceState> {
    (0..=horizon)
        .map(|l| sample_reference(spline, t_now + l as f64 * dt))
        .collect()
}

/// Previous plan shifted by one step with its last input repeated.
pub fn shift_warm_start(previous: &[ControlInput]) -> Vec<ControlInput> {
    if previous.is_empty() {
        return Vec::new();
    }
    let mut shifted: Vec<ControlInput> = previous[1..].to_vec();
    shifted.push(*previous.last().unwrap());
    shifted
}

/// One MPC solve tracking `spline` from `t_now`.
pub fn solve_mpc(
    x0: &AircraftState,
    spline: &PolySpline,
    t_now: f64,
    obstacles: &[Obstacle],
    u_prev: ControlInput,
    config: &MpcConfig,
    warm_start: Option<&[ControlInput]>,
) -> Result<MpcSolution> {
    let reference = reference_window(spline, t_now, config.horizon, config.dt);
    let nlp = build_nlp(*x0, reference, obstacles, u_prev, config)?;
    solve_nlp(&nlp, warm_start.unwrap_or(&[]))
}

/// Per-aircraft controller owning its warm start.
#[derive(Debug, Clone)]
pub struct MpcController {
    pub config: MpcConfig,
    last_plan: Vec<ControlInput>,
    last_applied: ControlInput,
}

impl MpcController {
    pub fn new(config: MpcConfig) -> Self {
        Self {
            config,
            last_plan: Vec::new(),
            last_applied: ControlInput::ZERO,
        }
    }

    pub fn last_applied(&self) -> ControlInput {
        self.last_applied
    }

    /// Solves against an explicit reference window and returns the input to
    /// apply; falls back to braking when no plan is available.
    pub fn control(
        &mut self,
        x0: &AircraftState,
        reference: Vec<ReferenceState>,
        obstacles: &[Obstacle],
    ) -> Result<(ControlInput, MpcSolution)> {
        let nlp = build_nlp(*x0, reference, obstacles, self.last_applied, &self.config)?;
        let warm = shift_warm_start(&self.last_plan);
        let sol = solve_nlp(&nlp, &warm)?;
        let u = if sol.is_usable() {
            self.last_plan = sol.inputs.clone();
            sol.first_input()
        } else {
            self.last_plan.clear();
            self.config.bounds.braking()
        };
        self.last_applied = u;
        Ok((u, sol))
    }
}

/// Zone access decision for the wait-and-go baseline.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum ZoneGate {
    /// Track the unresolved reference delayed by `time_shift` seconds.
    Go { time_shift: f64 },
    /// Hold at the stop line.
    Hold { stop: ReferenceState },
}

impl ZoneGate {
    pub const OPEN: ZoneGate = ZoneGate::Go { time_shift: 0.0 };
}

pub fn wait_and_go_reference(
    spline: &PolySpline,
    t_now: f64,
    gate: &ZoneGate,
    horizon: usize,
    dt: f64,
) -> Vec<ReferenceState> {
    match *gate {
        ZoneGate::Go { time_shift } => reference_window(spline, t_now - time_shift, horizon, dt),
        ZoneGate::Hold { stop } => vec![AircraftState { v: 0.0, ..stop }; horizon + 1],
    }
}

/// Wait-and-go command: an open gate tracks the reference exactly like the
/// naive controller, a closed gate stops at the line.
pub fn wait_and_go_policy(
    controller: &mut MpcController,
    x0: &AircraftState,
    spline: &PolySpline,
    t_now: f64,
    gate: &ZoneGate,
    obstacles: &[Obstacle],
) -> Result<(ControlInput, MpcSolution)> {
    let cfg = controller.config;
    let reference = wait_and_go_reference(spline, t_now, gate, cfg.horizon, cfg.dt);
    controller.control(x0, reference, obstacles)
}

//! Chance-constrained trajectory optimization over a kinematic bicycle
//! model: contouring/lag/velocity tracking objective, linearized Gaussian
//! collision constraints per obstacle and footprint disc, solved by the
//! condensed SQP in [`crate::ocp`].

use std::sync::Arc;

use nalgebra::{DMatrix, DVector, Matrix2};
use serde::{Deserialize, Serialize};

use crate::ocp::{self, OcpModel, SqpOptions};
use crate::path::ReferencePath;
use crate::prediction::GaussianPrediction;
use crate::stats::standard_normal_quantile;
use crate::topology::TopologySignature;
use crate::{Error, Result, Vec2};

/// Ego kinematic state.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct VehicleState {
    /// [m]
    pub x: f64,
    /// [m]
    pub y: f64,
    /// [rad]
    pub heading: f64,
    /// [m/s]
    pub speed: f64,
    /// Front wheel steering angle [rad].
    pub steering: f64,
    /// Progress along the reference path [m].
    pub progress: f64,
}

impl VehicleState {
    pub fn position(&self) -> Vec2 {
        Vec2::new(self.x, self.y)
    }

    pub fn to_vector(&self) -> DVector<f64> {
        DVector::from_row_slice(&[
            self.x,
            self.y,
            self.heading,
            self.speed,
            self.steering,
            self.progress,
        ])
    }

    pub fn from_vector(v: &DVector<f64>) -> Self {
        Self {
            x: v[0],
            y: v[1],
            heading: v[2],
            speed: v[3],
            steering: v[4],
            progress: v[5],
        }
    }
}

/// Commanded input.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ControlInput {
    /// [m/s^2]
    pub accel: f64,
    /// Steering rate [rad/s].
    pub steer_rate: f64,
}

impl ControlInput {
    pub fn to_vector(&self) -> DVector<f64> {
        DVector::from_row_slice(&[self.accel, self.steer_rate])
    }

    pub fn from_vector(v: &DVector<f64>) -> Self {
        Self {
            accel: v[0],
            steer_rate: v[1],
        }
    }
}

/// Objective weights and the per-cycle risk budget.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
#[serde(default)]
pub struct PlannerWeights {
    pub q_contour: f64,
    pub q_lag: f64,
    pub q_preview: f64,
    pub q_speed: f64,
    pub q_accel: f64,
    pub q_steer: f64,
    /// [m/s]
    pub v_ref: f64,
    /// Joint collision risk budget per cycle, allocated over constraints.
    pub risk: f64,
}

impl Default for PlannerWeights {
    fn default() -> Self {
        Self {
            q_contour: 1.0,
            q_lag: 1.0,
            q_preview: 1.0,
            q_speed: 0.5,
            q_accel: 0.1,
            q_steer: 0.5,
            v_ref: 2.0,
            risk: 0.35,
        }
    }
}

/// Kinematic bicycle limits and footprint.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct BicycleParams {
    /// Wheelbase [m].
    pub wheelbase: f64,
    pub v_min: f64,
    pub v_max: f64,
    pub a_max: f64,
    pub delta_max: f64,
    pub omega_max: f64,
    /// Footprint disc centers along the body axis, relative to the rear
    /// axle [m].
    pub disc_offsets: Vec<f64>,
    /// [m]
    pub disc_radius: f64,
    /// Deterministic buffer added to the combined radius in collision
    /// constraints; covers inter-sample motion between plan grid points [m].
    pub safety_margin: f64,
}

impl Default for BicycleParams {
    fn default() -> Self {
        Self {
            wheelbase: 2.7,
            v_min: 0.0,
            v_max: 5.0,
            a_max: 3.0,
            delta_max: 0.45,
            omega_max: 0.6,
            disc_offsets: vec![-0.15, 1.35, 2.85],
            disc_radius: 1.0,
            safety_margin: 0.2,
        }
    }
}

/// Integrate the kinematic bicycle one step with RK4.
pub fn bicycle_step(state: &VehicleState, input: &ControlInput, dt: f64, wheelbase: f64) -> VehicleState {
    let x = state.to_vector();
    let u = input.to_vector();
    let next = ocp::rk4(|x, u| bicycle_dot(x, u, wheelbase), &x, &u, dt);
    VehicleState::from_vector(&next)
}

/// Continuous bicycle dynamics, values only.
fn bicycle_dot(x: &DVector<f64>, u: &DVector<f64>, wheelbase: f64) -> DVector<f64> {
    let (psi, v, delta) = (x[2], x[3], x[4]);
    let (sin_psi, cos_psi) = psi.sin_cos();
    DVector::from_row_slice(&[
        v * cos_psi,
        v * sin_psi,
        v * delta.tan() / wheelbase,
        u[0],
        u[1],
        v,
    ])
}

/// Continuous bicycle dynamics with analytic Jacobians. State ordering
/// `(x, y, heading, speed, steering, progress)`, input `(accel, steer rate)`.
fn bicycle_derivative(
    x: &DVector<f64>,
    u: &DVector<f64>,
    wheelbase: f64,
) -> (DVector<f64>, DMatrix<f64>, DMatrix<f64>) {
    let (psi, v, delta) = (x[2], x[3], x[4]);
    let (sin_psi, cos_psi) = psi.sin_cos();
    let tan_delta = delta.tan();
    let sec2 = 1.0 / (delta.cos() * delta.cos());

    let dot = DVector::from_row_slice(&[
        v * cos_psi,
        v * sin_psi,
        v * tan_delta / wheelbase,
        u[0],
        u[1],
        v,
    ]);

    let mut a = DMatrix::zeros(6, 6);
    a[(0, 2)] = -v * sin_psi;
    a[(0, 3)] = cos_psi;
    a[(1, 2)] = v * cos_psi;
    a[(1, 3)] = sin_psi;
    a[(2, 3)] = tan_delta / wheelbase;
    a[(2, 4)] = v * sec2 / wheelbase;
    a[(5, 3)] = 1.0;

    let mut b = DMatrix::zeros(6, 2);
    b[(3, 0)] = 1.0;
    b[(4, 1)] = 1.0;

    (dot, a, b)
}

/// Collision half-plane `normal . p >= offset`.
#[derive(Debug, Clone, Copy)]
pub struct HalfPlane {
    pub normal: Vec2,
    pub offset: f64,
}

/// Linearize the Gaussian collision chance constraint about `p_hat`: keep
/// the ego at least `r` plus the `1 - eps` quantile margin away from the
/// obstacle mean along the separating direction.
pub fn linearize_chance_constraint(
    p_hat: Vec2,
    mu: Vec2,
    sigma: &Matrix2<f64>,
    r: f64,
    eps: f64,
) -> Result<HalfPlane> {
    if !(0.0..0.5).contains(&eps) || eps == 0.0 {
        return Err(Error::InvalidInput(format!(
            "risk must lie in (0, 0.5), got {eps}"
        )));
    }
    let diff = p_hat - mu;
    let dist = diff.norm();
    if dist < 1e-12 {
        return Err(Error::DegenerateLinearization);
    }
    let normal = diff / dist;
    let gamma = standard_normal_quantile(1.0 - eps);
    let directional_var = (normal.transpose() * sigma * normal)[(0, 0)].max(0.0);
    let offset = normal.dot(&mu) + r + gamma * directional_var.sqrt();
    Ok(HalfPlane { normal, offset })
}

/// Risk allocation across the horizon and obstacle set.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RiskAllocation {
    /// Union bound: each constraint receives `eps_joint / (N * n_obs)`.
    Uniform,
    /// Each constraint receives the full `eps_joint`.
    PerConstraint,
}

/// Per-(step, obstacle) risk values, indexed `k * n_obs + j` for
/// `k in 0..n_steps`. Empty when there are no obstacles.
pub fn allocate_risk(
    eps_joint: f64,
    n_steps: usize,
    n_obs: usize,
    mode: RiskAllocation,
) -> Vec<f64> {
    if n_obs == 0 {
        return Vec::new();
    }
    let per = match mode {
        RiskAllocation::Uniform => eps_joint / (n_steps * n_obs) as f64,
        RiskAllocation::PerConstraint => eps_joint,
    };
    vec![per; n_steps * n_obs]
}

/// Nonlinear program for one planning instance (Eq. structure: initial
/// state, dynamics, bounds, and per-step linearized chance constraints).
pub struct PlannerProblem {
    pub path: Arc<ReferencePath>,
    pub predictions: Vec<GaussianPrediction>,
    pub weights: PlannerWeights,
    pub params: BicycleParams,
    pub dt: f64,
    pub n: usize,
    pub x_init: VehicleState,
    /// Preview distance ahead of the terminal progress [m].
    pub preview_distance: f64,
    /// Risk per (step, obstacle) pair.
    risk_table: Vec<f64>,
    /// Linearized half-planes, `[k-1]`, refreshed per iterate. Pairs
    /// unreachable within the speed bound are pruned.
    halfplanes: Vec<Vec<ChanceRow>>,
}

/// One linearized collision constraint row.
#[derive(Debug, Clone, Copy)]
struct ChanceRow {
    obstacle: usize,
    disc: usize,
    plane: HalfPlane,
}

impl PlannerProblem {
    pub fn n_discs(&self) -> usize {
        self.params.disc_offsets.len()
    }

    pub fn n_obstacles(&self) -> usize {
        self.predictions.len()
    }

    /// Chance-constraint count over the horizon (`N * n_obs * n_d`).
    pub fn n_chance_constraints(&self) -> usize {
        self.n * self.n_obstacles() * self.n_discs()
    }

    /// Input and state bound rows.
    pub fn n_bound_constraints(&self) -> usize {
        4 * self.n + 4 * self.n
    }

    /// Dynamics equality constraints (eliminated inside the solver but part
    /// of the problem statement).
    pub fn n_dynamics_constraints(&self) -> usize {
        self.n * 6
    }

    pub fn n_decision_variables(&self) -> usize {
        (self.n + 1) * 6 + self.n * 2
    }

    fn disc_center(&self, x: &DVector<f64>, d: usize) -> Vec2 {
        let offset = self.params.disc_offsets[d];
        Vec2::new(x[0] + offset * x[2].cos(), x[1] + offset * x[2].sin())
    }

    /// Risk assigned to (step k in 1..=N, obstacle j).
    fn risk_at(&self, k: usize, j: usize) -> f64 {
        self.risk_table[(k - 1) * self.n_obstacles() + j]
    }
}

/// Build the planning problem for one instance. Predictions must already
/// cover the horizon (extend beforehand).
pub fn build_problem(
    x_init: VehicleState,
    path: Arc<ReferencePath>,
    predictions: Vec<GaussianPrediction>,
    weights: PlannerWeights,
    params: BicycleParams,
    dt: f64,
    n: usize,
    allocation: RiskAllocation,
) -> PlannerProblem {
    let risk_table = allocate_risk(weights.risk, n, predictions.len(), allocation);
    let halfplanes = vec![Vec::new(); n];
    let preview_distance = (weights.v_ref * 1.0).max(1.0);
    PlannerProblem {
        path,
        predictions,
        weights,
        params,
        dt,
        n,
        x_init,
        preview_distance,
        risk_table,
        halfplanes,
    }
}

/// Contouring and lag errors plus their derivatives with respect to the
/// position and the progress coordinate, clamp-aware at the path ends.
pub(crate) struct ContourJet {
    pub e_c: f64,
    pub e_l: f64,
    pub normal: Vec2,
    pub tangent: Vec2,
    pub de_c_ds: f64,
    pub de_l_ds: f64,
}

pub(crate) fn contour_jet(path: &ReferencePath, p: Vec2, s: f64) -> ContourJet {
    let clamped = s < 0.0 || s > path.total_length();
    let sc = s.clamp(0.0, path.total_length());
    let pos = path.position(sc);
    let (d1, d2) = path.derivatives(sc);
    let g = d1.norm();
    let tangent = d1 / g;
    let normal = Vec2::new(-tangent.y, tangent.x);
    let rel = p - pos;
    let e_c = normal.dot(&rel);
    let e_l = tangent.dot(&rel);
    let (de_c_ds, de_l_ds) = if clamped {
        (0.0, 0.0)
    } else {
        let dt_ds = (d2 - tangent * tangent.dot(&d2)) / g;
        let dn_ds = Vec2::new(-dt_ds.y, dt_ds.x);
        (dn_ds.dot(&rel), dt_ds.dot(&rel) - g)
    };
    ContourJet {
        e_c,
        e_l,
        normal,
        tangent,
        de_c_ds,
        de_l_ds,
    }
}

/// Path tangent heading and its progress derivative, clamp-aware.
pub(crate) fn heading_jet(path: &ReferencePath, s: f64) -> (f64, f64) {
    let clamped = s < 0.0 || s > path.total_length();
    let sc = s.clamp(0.0, path.total_length());
    let (d1, d2) = path.derivatives(sc);
    let theta = d1.y.atan2(d1.x);
    let dtheta = if clamped {
        0.0
    } else {
        (d1.x * d2.y - d1.y * d2.x) / d1.norm_squared()
    };
    (theta, dtheta)
}

fn wrap_angle(a: f64) -> f64 {
    let two_pi = std::f64::consts::TAU;
    let r = a.rem_euclid(two_pi);
    if r > std::f64::consts::PI {
        r - two_pi
    } else {
        r
    }
}

impl OcpModel for PlannerProblem {
    fn nx(&self) -> usize {
        6
    }
    fn nu(&self) -> usize {
        2
    }
    fn horizon(&self) -> usize {
        self.n
    }
    fn initial_state(&self) -> DVector<f64> {
        self.x_init.to_vector()
    }

    fn step(&self, _k: usize, x: &DVector<f64>, u: &DVector<f64>) -> DVector<f64> {
        ocp::rk4(|x, u| bicycle_dot(x, u, self.params.wheelbase), x, u, self.dt)
    }

    fn step_jacobians(
        &self,
        _k: usize,
        x: &DVector<f64>,
        u: &DVector<f64>,
    ) -> (DMatrix<f64>, DMatrix<f64>) {
        let (_, a, b) = ocp::rk4_with_jacobians(
            |x, u| bicycle_derivative(x, u, self.params.wheelbase),
            x,
            u,
            self.dt,
        );
        (a, b)
    }

    fn prepare(&mut self, states: &[DVector<f64>], _inputs: &[DVector<f64>]) {
        let n_d = self.n_discs();
        let r_total: Vec<f64> = self
            .predictions
            .iter()
            .map(|p| p.radius + self.params.disc_radius + self.params.safety_margin)
            .collect();
        // No trajectory can leave the v_max ball around the start, so
        // obstacle/step pairs beyond it can never bind.
        let ego0 = Vec2::new(states[0][0], states[0][1]);
        let max_offset = self
            .params
            .disc_offsets
            .iter()
            .fold(0.0_f64, |acc, o| acc.max(o.abs()));
        for k in 1..=self.n {
            let reach = self.params.v_max * self.dt * k as f64 + max_offset;
            let mut planes = Vec::with_capacity(n_d);
            for (j, pred) in self.predictions.iter().enumerate() {
                let mu = pred.means[k];
                let sigma = pred.covariances[k];
                let eps = self.risk_at(k, j);
                let gamma = standard_normal_quantile(1.0 - eps);
                // trace bounds the largest eigenvalue of a PSD matrix.
                let sigma_bound = (sigma[(0, 0)] + sigma[(1, 1)]).max(0.0).sqrt();
                if (mu - ego0).norm() > reach + r_total[j] + gamma * sigma_bound + 0.5 {
                    continue;
                }
                for d in 0..n_d {
                    let mut p_hat = self.disc_center(&states[k], d);
                    if (p_hat - mu).norm() < 1e-9 {
                        // Degenerate linearization: nudge along the previous
                        // step direction (or +x as a last resort).
                        let prev = self.disc_center(&states[k - 1], d);
                        let dir = p_hat - prev;
                        let dir = if dir.norm() > 1e-9 {
                            dir / dir.norm()
                        } else {
                            Vec2::new(1.0, 0.0)
                        };
                        p_hat += dir * 1e-6;
                    }
                    let hp = linearize_chance_constraint(p_hat, mu, &sigma, r_total[j], eps)
                        .expect("nudged linearization cannot degenerate");
                    planes.push(ChanceRow {
                        obstacle: j,
                        disc: d,
                        plane: hp,
                    });
                }
            }
            self.halfplanes[k - 1] = planes;
        }
    }

    fn n_stage_residuals(&self) -> usize {
        5
    }

    fn stage_residuals(&self, _k: usize, x: &DVector<f64>, u: &DVector<f64>) -> DVector<f64> {
        let jet = contour_jet(&self.path, Vec2::new(x[0], x[1]), x[5]);
        let w = &self.weights;
        DVector::from_row_slice(&[
            w.q_contour.sqrt() * jet.e_c,
            w.q_lag.sqrt() * jet.e_l,
            w.q_speed.sqrt() * (x[3] - w.v_ref),
            w.q_accel.sqrt() * u[0],
            w.q_steer.sqrt() * u[1],
        ])
    }

    fn stage_residual_jacobians(
        &self,
        _k: usize,
        x: &DVector<f64>,
        _u: &DVector<f64>,
    ) -> (DMatrix<f64>, DMatrix<f64>) {
        let jet = contour_jet(&self.path, Vec2::new(x[0], x[1]), x[5]);
        let w = &self.weights;
        let mut jx = DMatrix::zeros(5, 6);
        let sq_c = w.q_contour.sqrt();
        let sq_l = w.q_lag.sqrt();
        jx[(0, 0)] = sq_c * jet.normal.x;
        jx[(0, 1)] = sq_c * jet.normal.y;
        jx[(0, 5)] = sq_c * jet.de_c_ds;
        jx[(1, 0)] = sq_l * jet.tangent.x;
        jx[(1, 1)] = sq_l * jet.tangent.y;
        jx[(1, 5)] = sq_l * jet.de_l_ds;
        jx[(2, 3)] = w.q_speed.sqrt();
        let mut ju = DMatrix::zeros(5, 2);
        ju[(3, 0)] = w.q_accel.sqrt();
        ju[(4, 1)] = w.q_steer.sqrt();
        (jx, ju)
    }

    fn n_terminal_residuals(&self) -> usize {
        5
    }

    fn terminal_residuals(&self, x: &DVector<f64>) -> DVector<f64> {
        let w = &self.weights;
        let p = Vec2::new(x[0], x[1]);
        let jet = contour_jet(&self.path, p, x[5]);
        let s_prev = x[5] + self.preview_distance;
        let jet_prev = contour_jet(&self.path, p, s_prev);
        let (theta, _) = heading_jet(&self.path, s_prev);
        DVector::from_row_slice(&[
            w.q_contour.sqrt() * jet.e_c,
            w.q_lag.sqrt() * jet.e_l,
            w.q_speed.sqrt() * (x[3] - w.v_ref),
            w.q_preview.sqrt() * jet_prev.e_c,
            w.q_preview.sqrt() * wrap_angle(x[2] - theta),
        ])
    }

    fn terminal_residual_jacobian(&self, x: &DVector<f64>) -> DMatrix<f64> {
        let w = &self.weights;
        let p = Vec2::new(x[0], x[1]);
        let jet = contour_jet(&self.path, p, x[5]);
        let s_prev = x[5] + self.preview_distance;
        let jet_prev = contour_jet(&self.path, p, s_prev);
        let (_, dtheta) = heading_jet(&self.path, s_prev);
        let mut jx = DMatrix::zeros(5, 6);
        let sq_c = w.q_contour.sqrt();
        let sq_l = w.q_lag.sqrt();
        let sq_p = w.q_preview.sqrt();
        jx[(0, 0)] = sq_c * jet.normal.x;
        jx[(0, 1)] = sq_c * jet.normal.y;
        jx[(0, 5)] = sq_c * jet.de_c_ds;
        jx[(1, 0)] = sq_l * jet.tangent.x;
        jx[(1, 1)] = sq_l * jet.tangent.y;
        jx[(1, 5)] = sq_l * jet.de_l_ds;
        jx[(2, 3)] = w.q_speed.sqrt();
        jx[(3, 0)] = sq_p * jet_prev.normal.x;
        jx[(3, 1)] = sq_p * jet_prev.normal.y;
        jx[(3, 5)] = sq_p * jet_prev.de_c_ds;
        jx[(4, 2)] = sq_p;
        jx[(4, 5)] = -sq_p * dtheta;
        jx
    }

    fn n_stage_ineq(&self, k: usize) -> usize {
        if k == 0 {
            4
        } else {
            8 + self.halfplanes[k - 1].len()
        }
    }

    fn stage_ineq(&self, k: usize, x: &DVector<f64>, u: &DVector<f64>) -> DVector<f64> {
        let p = &self.params;
        let mut g = Vec::with_capacity(self.n_stage_ineq(k));
        g.push(p.a_max - u[0]);
        g.push(p.a_max + u[0]);
        g.push(p.omega_max - u[1]);
        g.push(p.omega_max + u[1]);
        if k > 0 {
            g.push(x[3] - p.v_min);
            g.push(p.v_max - x[3]);
            g.push(p.delta_max - x[4]);
            g.push(p.delta_max + x[4]);
            for row in self.halfplanes[k - 1].iter() {
                let c = self.disc_center(x, row.disc);
                g.push(row.plane.normal.dot(&c) - row.plane.offset);
            }
        }
        DVector::from_vec(g)
    }

    fn stage_ineq_jacobians(
        &self,
        k: usize,
        x: &DVector<f64>,
        _u: &DVector<f64>,
    ) -> (DMatrix<f64>, DMatrix<f64>) {
        let rows = self.n_stage_ineq(k);
        let mut gx = DMatrix::zeros(rows, 6);
        let mut gu = DMatrix::zeros(rows, 2);
        gu[(0, 0)] = -1.0;
        gu[(1, 0)] = 1.0;
        gu[(2, 1)] = -1.0;
        gu[(3, 1)] = 1.0;
        if k > 0 {
            gx[(4, 3)] = 1.0;
            gx[(5, 3)] = -1.0;
            gx[(6, 4)] = -1.0;
            gx[(7, 4)] = 1.0;
            let (sin_psi, cos_psi) = x[2].sin_cos();
            for (idx, cr) in self.halfplanes[k - 1].iter().enumerate() {
                let offset = self.params.disc_offsets[cr.disc];
                let row = 8 + idx;
                gx[(row, 0)] = cr.plane.normal.x;
                gx[(row, 1)] = cr.plane.normal.y;
                gx[(row, 2)] = offset * (-cr.plane.normal.x * sin_psi + cr.plane.normal.y * cos_psi);
            }
        }
        (gx, gu)
    }

    fn stage_ineq_soft(&self, k: usize) -> Vec<bool> {
        let mut soft = vec![false; self.n_stage_ineq(k)];
        if k > 0 {
            for entry in soft.iter_mut().skip(8) {
                *entry = true;
            }
        }
        soft
    }

    fn stage_ineq_group(&self, k: usize) -> Vec<usize> {
        let mut group = vec![usize::MAX; self.n_stage_ineq(k)];
        if k > 0 {
            for (idx, row) in self.halfplanes[k - 1].iter().enumerate() {
                group[8 + idx] = row.obstacle;
            }
        }
        group
    }

    fn n_terminal_ineq(&self) -> usize {
        4 + self.halfplanes[self.n - 1].len()
    }

    fn terminal_ineq(&self, x: &DVector<f64>) -> DVector<f64> {
        let p = &self.params;
        let mut g = Vec::with_capacity(self.n_terminal_ineq());
        g.push(x[3] - p.v_min);
        g.push(p.v_max - x[3]);
        g.push(p.delta_max - x[4]);
        g.push(p.delta_max + x[4]);
        for row in self.halfplanes[self.n - 1].iter() {
            let c = self.disc_center(x, row.disc);
            g.push(row.plane.normal.dot(&c) - row.plane.offset);
        }
        DVector::from_vec(g)
    }

    fn terminal_ineq_jacobian(&self, x: &DVector<f64>) -> DMatrix<f64> {
        let rows = self.n_terminal_ineq();
        let mut gx = DMatrix::zeros(rows, 6);
        gx[(0, 3)] = 1.0;
        gx[(1, 3)] = -1.0;
        gx[(2, 4)] = -1.0;
        gx[(3, 4)] = 1.0;
        let (sin_psi, cos_psi) = x[2].sin_cos();
        for (idx, cr) in self.halfplanes[self.n - 1].iter().enumerate() {
            let offset = self.params.disc_offsets[cr.disc];
            let row = 4 + idx;
            gx[(row, 0)] = cr.plane.normal.x;
            gx[(row, 1)] = cr.plane.normal.y;
            gx[(row, 2)] = offset * (-cr.plane.normal.x * sin_psi + cr.plane.normal.y * cos_psi);
        }
        gx
    }

    fn terminal_ineq_soft(&self) -> Vec<bool> {
        let mut soft = vec![false; self.n_terminal_ineq()];
        for entry in soft.iter_mut().skip(4) {
            *entry = true;
        }
        soft
    }

    fn terminal_ineq_group(&self) -> Vec<usize> {
        let mut group = vec![usize::MAX; self.n_terminal_ineq()];
        for (idx, row) in self.halfplanes[self.n - 1].iter().enumerate() {
            group[4 + idx] = row.obstacle;
        }
        group
    }
}

/// Where a planner instance's warm start came from (instrumented for the
/// infeasibility comparison).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum WarmStartKind {
    Guidance,
    ShiftedPrevious,
    BrakingRollout,
    Cold,
}

/// Optimized trajectory with solver telemetry.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PlannerSolution {
    pub states: Vec<VehicleState>,
    pub inputs: Vec<ControlInput>,
    pub cost: f64,
    pub feasible: bool,
    pub kkt_residual: f64,
    pub iterations: usize,
    pub soft_retry: bool,
    pub max_violation: f64,
    pub signature: TopologySignature,
    pub warm_start: WarmStartKind,
}

impl PlannerSolution {
    pub fn positions(&self) -> Vec<Vec2> {
        self.states.iter().map(|s| s.position()).collect()
    }
}

/// Solve one planner instance from a typed warm start.
pub fn solve_planner(
    problem: &mut PlannerProblem,
    warm_states: &[VehicleState],
    warm_inputs: &[ControlInput],
    warm_kind: WarmStartKind,
    theta_pass: f64,
    opts: &SqpOptions,
) -> PlannerSolution {
    let ws: Vec<DVector<f64>> = warm_states.iter().map(|s| s.to_vector()).collect();
    let wu: Vec<DVector<f64>> = warm_inputs.iter().map(|u| u.to_vector()).collect();
    let sol = ocp::solve_sqp(problem, &ws, &wu, opts);
    let states: Vec<VehicleState> = sol.states.iter().map(VehicleState::from_vector).collect();
    let inputs: Vec<ControlInput> = sol.inputs.iter().map(ControlInput::from_vector).collect();
    let positions: Vec<Vec2> = states.iter().map(|s| s.position()).collect();
    let signature =
        crate::topology::passing_signature(&positions, &problem.predictions, theta_pass)
            .unwrap_or_default();
    PlannerSolution {
        states,
        inputs,
        cost: sol.cost,
        feasible: sol.feasible,
        kkt_residual: sol.kkt_residual,
        iterations: sol.iterations,
        soft_retry: sol.soft_retry,
        max_violation: sol.max_violation,
        signature,
        warm_start: warm_kind,
    }
}

/// Objective value recomputed independently of the solver's residual
/// stacking (used by the decision layer and as a cross-check in tests).
pub fn evaluate_cost(
    states: &[VehicleState],
    inputs: &[ControlInput],
    weights: &PlannerWeights,
    path: &ReferencePath,
    preview_distance: f64,
) -> f64 {
    let n = inputs.len();
    let mut total = 0.0;
    for k in 0..=n {
        let st = &states[k];
        let (e_c, e_l) = path
            .contouring_errors(st.position(), st.progress.clamp(0.0, path.total_length()))
            .expect("finite progress");
        total += weights.q_contour * e_c * e_c
            + weights.q_lag * e_l * e_l
            + weights.q_speed * (st.speed - weights.v_ref).powi(2);
        if k < n {
            total += weights.q_accel * inputs[k].accel.powi(2)
                + weights.q_steer * inputs[k].steer_rate.powi(2);
        }
    }
    // Terminal preview: contouring error and heading misalignment at a
    // point ahead of the terminal progress.
    let last = states[n];
    let s_prev = (last.progress + preview_distance).clamp(0.0, path.total_length());
    let (e_c_prev, _) = path
        .contouring_errors(last.position(), s_prev)
        .expect("finite progress");
    let theta = path.heading(s_prev);
    total += weights.q_preview * e_c_prev * e_c_prev
        + weights.q_preview * wrap_angle(last.heading - theta).powi(2);
    total
}

/// Roll a constant input sequence (or any input sequence) into states.
pub fn rollout(
    x_init: &VehicleState,
    inputs: &[ControlInput],
    dt: f64,
    wheelbase: f64,
) -> Vec<VehicleState> {
    let mut states = Vec::with_capacity(inputs.len() + 1);
    states.push(*x_init);
    for (k, u) in inputs.iter().enumerate() {
        states.push(bicycle_step(&states[k], u, dt, wheelbase));
    }
    states
}

/// Zero-input warm start (constant speed straight-line rollout).
pub fn cold_start(x_init: &VehicleState, dt: f64, n: usize, params: &BicycleParams) -> (Vec<VehicleState>, Vec<ControlInput>) {
    let inputs = vec![
        ControlInput {
            accel: 0.0,
            steer_rate: 0.0
        };
        n
    ];
    (rollout(x_init, &inputs, dt, params.wheelbase), inputs)
}

/// Maximum-deceleration rollout used as the emergency fallback.
pub fn braking_rollout(
    x_init: &VehicleState,
    dt: f64,
    n: usize,
    params: &BicycleParams,
) -> (Vec<VehicleState>, Vec<ControlInput>) {
    let mut states = vec![*x_init];
    let mut inputs = Vec::with_capacity(n);
    for k in 0..n {
        let v = states[k].speed;
        let accel = if v > 1e-9 {
            (-params.a_max).max(-v / dt)
        } else {
            0.0
        };
        // Ease the steering back to center while braking.
        let steer_rate = (-states[k].steering / dt).clamp(-params.omega_max, params.omega_max);
        let u = ControlInput { accel, steer_rate };
        states.push(bicycle_step(&states[k], &u, dt, params.wheelbase));
        inputs.push(u);
    }
    (states, inputs)
}

//! Contouring trajectory-tracking controller over a nonlinear single-track
//! vehicle with Fiala tires and per-axle friction-circle constraints. The
//! controller consumes the planner's selected trajectory as a spline
//! reference with a speed profile and reuses the SQP machinery.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::ocp::{self, OcpModel, SqpOptions};
use crate::path::ReferencePath;
use crate::path::Waypoint;
use crate::trajopt::{contour_jet, VehicleState};
use crate::Vec2;

/// Internal scaling of the force-rate input so both decision variables are
/// O(1) in the QP.
const FORCE_RATE_SCALE: f64 = 5000.0;

/// Single-track chassis state.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SingleTrackState {
    /// [m]
    pub x: f64,
    /// [m]
    pub y: f64,
    /// [rad]
    pub heading: f64,
    /// Longitudinal velocity [m/s].
    pub vx: f64,
    /// Lateral velocity [m/s].
    pub vy: f64,
    /// Yaw rate [rad/s].
    pub yaw_rate: f64,
    /// Steering angle [rad].
    pub steering: f64,
    /// Longitudinal force command state [N].
    pub fx: f64,
    /// Progress along the tracked reference [m].
    pub progress: f64,
}

impl SingleTrackState {
    pub fn position(&self) -> Vec2 {
        Vec2::new(self.x, self.y)
    }

    pub fn at_rest(x: f64, y: f64, heading: f64) -> Self {
        Self {
            x,
            y,
            heading,
            vx: 0.0,
            vy: 0.0,
            yaw_rate: 0.0,
            steering: 0.0,
            fx: 0.0,
            progress: 0.0,
        }
    }

    fn to_vector(&self) -> DVector<f64> {
        DVector::from_row_slice(&[
            self.x,
            self.y,
            self.heading,
            self.vx,
            self.vy,
            self.yaw_rate,
            self.steering,
            self.fx,
            self.progress,
        ])
    }

    fn from_vector(v: &DVector<f64>) -> Self {
        Self {
            x: v[0],
            y: v[1],
            heading: v[2],
            vx: v[3],
            vy: v[4],
            yaw_rate: v[5],
            steering: v[6],
            fx: v[7],
            progress: v[8],
        }
    }
}

/// Cubic saturating lateral tire law parameters (per axle).
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct FialaTireParams {
    /// Cornering stiffness [N/rad].
    pub cornering_stiffness: f64,
    /// Friction coefficient.
    pub friction: f64,
    /// Vertical load [N].
    pub vertical_load: f64,
}

impl FialaTireParams {
    pub fn max_force(&self) -> f64 {
        self.friction * self.vertical_load
    }
}

/// Chassis and actuator parameters.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct SingleTrackParams {
    /// [kg]
    pub mass: f64,
    /// Yaw inertia [kg m^2].
    pub inertia_z: f64,
    /// Center of gravity to front axle [m].
    pub lf: f64,
    /// Center of gravity to rear axle [m].
    pub lr: f64,
    pub front_tire: FialaTireParams,
    pub rear_tire: FialaTireParams,
    /// Fraction of the longitudinal force on the front axle.
    pub drive_split_front: f64,
    /// Longitudinal speed floor in slip computations [m/s].
    pub v_slip_guard: f64,
    pub delta_max: f64,
    /// [N]
    pub fx_max: f64,
    /// [rad/s]
    pub steer_rate_max: f64,
    /// [N/s]
    pub fx_rate_max: f64,
}

impl Default for SingleTrackParams {
    fn default() -> Self {
        // Mid-size sedan; vertical loads from the static weight split.
        let mass = 1500.0;
        let (lf, lr) = (1.2, 1.5);
        let g = 9.81;
        Self {
            mass,
            inertia_z: 2500.0,
            lf,
            lr,
            front_tire: FialaTireParams {
                cornering_stiffness: 60_000.0,
                friction: 0.9,
                vertical_load: mass * g * lr / (lf + lr),
            },
            rear_tire: FialaTireParams {
                cornering_stiffness: 60_000.0,
                friction: 0.9,
                vertical_load: mass * g * lf / (lf + lr),
            },
            drive_split_front: 0.5,
            v_slip_guard: 0.5,
            delta_max: 0.45,
            fx_max: 6000.0,
            steer_rate_max: 0.6,
            fx_rate_max: 15_000.0,
        }
    }
}

/// Commanded actuator rates.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrackerCommand {
    /// [rad/s]
    pub steer_rate: f64,
    /// [N/s]
    pub force_rate: f64,
}

impl TrackerCommand {
    pub const ZERO: Self = Self {
        steer_rate: 0.0,
        force_rate: 0.0,
    };
}

/// Cubic Fiala lateral force law with full saturation at the friction limit.
pub fn fiala_lateral_force(alpha: f64, p: &FialaTireParams) -> f64 {
    let m = p.max_force();
    let u = p.cornering_stiffness * alpha.tan();
    if u.abs() < 3.0 * m {
        -u * (1.0 - u.abs() / (3.0 * m) + u * u / (27.0 * m * m))
    } else {
        -m * alpha.signum()
    }
}

/// Derivative of the Fiala law with respect to the slip angle.
pub fn fiala_lateral_force_derivative(alpha: f64, p: &FialaTireParams) -> f64 {
    let m = p.max_force();
    let tan = alpha.tan();
    let u = p.cornering_stiffness * tan;
    if u.abs() < 3.0 * m {
        let df_du = -(1.0 - 2.0 * u.abs() / (3.0 * m) + u * u / (9.0 * m * m));
        let sec2 = 1.0 + tan * tan;
        df_du * p.cornering_stiffness * sec2
    } else {
        0.0
    }
}

/// Front/rear slip angles with their partial derivatives over
/// `(vx, vy, r, delta)`.
struct SlipJet {
    alpha: f64,
    d_vx: f64,
    d_vy: f64,
    d_r: f64,
    d_delta: f64,
}

fn slip_front(vx: f64, vy: f64, r: f64, delta: f64, p: &SingleTrackParams) -> SlipJet {
    let d = vx.max(p.v_slip_guard);
    let n = vy + p.lf * r;
    let denom = n * n + d * d;
    SlipJet {
        alpha: n.atan2(d) - delta,
        d_vx: if vx > p.v_slip_guard { -n / denom } else { 0.0 },
        d_vy: d / denom,
        d_r: p.lf * d / denom,
        d_delta: -1.0,
    }
}

fn slip_rear(vx: f64, vy: f64, r: f64, p: &SingleTrackParams) -> SlipJet {
    let d = vx.max(p.v_slip_guard);
    let n = vy - p.lr * r;
    let denom = n * n + d * d;
    SlipJet {
        alpha: n.atan2(d),
        d_vx: if vx > p.v_slip_guard { -n / denom } else { 0.0 },
        d_vy: d / denom,
        d_r: -p.lr * d / denom,
        d_delta: 0.0,
    }
}

/// Continuous dynamics with analytic Jacobians. State ordering
/// `(x, y, heading, vx, vy, r, delta, fx, s)`; inputs are the steering rate
/// and the scaled force rate.
fn single_track_derivative(
    x: &DVector<f64>,
    u: &DVector<f64>,
    p: &SingleTrackParams,
) -> (DVector<f64>, DMatrix<f64>, DMatrix<f64>) {
    let (psi, vx, vy, r, delta, fx) = (x[2], x[3], x[4], x[5], x[6], x[7]);
    let (sin_psi, cos_psi) = psi.sin_cos();
    let (sin_d, cos_d) = delta.sin_cos();

    let sf = slip_front(vx, vy, r, delta, p);
    let sr = slip_rear(vx, vy, r, p);
    let fyf = fiala_lateral_force(sf.alpha, &p.front_tire);
    let fyr = fiala_lateral_force(sr.alpha, &p.rear_tire);
    let dfyf = fiala_lateral_force_derivative(sf.alpha, &p.front_tire);
    let dfyr = fiala_lateral_force_derivative(sr.alpha, &p.rear_tire);
    let fxf = p.drive_split_front * fx;
    let fxr = (1.0 - p.drive_split_front) * fx;

    let m = p.mass;
    let iz = p.inertia_z;
    let dot = DVector::from_row_slice(&[
        vx * cos_psi - vy * sin_psi,
        vx * sin_psi + vy * cos_psi,
        r,
        (fxf * cos_d - fyf * sin_d + fxr) / m + r * vy,
        (fyf * cos_d + fxf * sin_d + fyr) / m - r * vx,
        (p.lf * (fyf * cos_d + fxf * sin_d) - p.lr * fyr) / iz,
        u[0],
        u[1] * FORCE_RATE_SCALE,
        vx,
    ]);

    let mut a = DMatrix::zeros(9, 9);
    // Kinematic rows.
    a[(0, 2)] = -vx * sin_psi - vy * cos_psi;
    a[(0, 3)] = cos_psi;
    a[(0, 4)] = -sin_psi;
    a[(1, 2)] = vx * cos_psi - vy * sin_psi;
    a[(1, 3)] = sin_psi;
    a[(1, 4)] = cos_psi;
    a[(2, 5)] = 1.0;
    a[(8, 3)] = 1.0;

    // vx dynamics.
    a[(3, 3)] = (-sin_d * dfyf * sf.d_vx) / m;
    a[(3, 4)] = r + (-sin_d * dfyf * sf.d_vy) / m;
    a[(3, 5)] = vy + (-sin_d * dfyf * sf.d_r) / m;
    a[(3, 6)] = (-fxf * sin_d - (dfyf * sf.d_delta) * sin_d - fyf * cos_d) / m;
    a[(3, 7)] = (p.drive_split_front * cos_d + (1.0 - p.drive_split_front)) / m;

    // vy dynamics.
    a[(4, 3)] = -r + (cos_d * dfyf * sf.d_vx + dfyr * sr.d_vx) / m;
    a[(4, 4)] = (cos_d * dfyf * sf.d_vy + dfyr * sr.d_vy) / m;
    a[(4, 5)] = -vx + (cos_d * dfyf * sf.d_r + dfyr * sr.d_r) / m;
    a[(4, 6)] = (dfyf * sf.d_delta * cos_d - fyf * sin_d + fxf * cos_d) / m;
    a[(4, 7)] = p.drive_split_front * sin_d / m;

    // Yaw dynamics.
    a[(5, 3)] = (p.lf * cos_d * dfyf * sf.d_vx - p.lr * dfyr * sr.d_vx) / iz;
    a[(5, 4)] = (p.lf * cos_d * dfyf * sf.d_vy - p.lr * dfyr * sr.d_vy) / iz;
    a[(5, 5)] = (p.lf * cos_d * dfyf * sf.d_r - p.lr * dfyr * sr.d_r) / iz;
    a[(5, 6)] = p.lf * (dfyf * sf.d_delta * cos_d - fyf * sin_d + fxf * cos_d) / iz;
    a[(5, 7)] = p.lf * p.drive_split_front * sin_d / iz;

    let mut b = DMatrix::zeros(9, 2);
    b[(6, 0)] = 1.0;
    b[(7, 1)] = FORCE_RATE_SCALE;

    (dot, a, b)
}

/// Continuous single-track dynamics, values only.
fn single_track_dot(
    x: &DVector<f64>,
    u: &DVector<f64>,
    p: &SingleTrackParams,
) -> DVector<f64> {
    let (psi, vx, vy, r, delta, fx) = (x[2], x[3], x[4], x[5], x[6], x[7]);
    let (sin_psi, cos_psi) = psi.sin_cos();
    let (sin_d, cos_d) = delta.sin_cos();
    let sf = slip_front(vx, vy, r, delta, p);
    let sr = slip_rear(vx, vy, r, p);
    let fyf = fiala_lateral_force(sf.alpha, &p.front_tire);
    let fyr = fiala_lateral_force(sr.alpha, &p.rear_tire);
    let fxf = p.drive_split_front * fx;
    let fxr = (1.0 - p.drive_split_front) * fx;
    DVector::from_row_slice(&[
        vx * cos_psi - vy * sin_psi,
        vx * sin_psi + vy * cos_psi,
        r,
        (fxf * cos_d - fyf * sin_d + fxr) / p.mass + r * vy,
        (fyf * cos_d + fxf * sin_d + fyr) / p.mass - r * vx,
        (p.lf * (fyf * cos_d + fxf * sin_d) - p.lr * fyr) / p.inertia_z,
        u[0],
        u[1] * FORCE_RATE_SCALE,
        vx,
    ])
}

/// Integrate the single-track model one step with RK4.
pub fn single_track_step(
    state: &SingleTrackState,
    cmd: &TrackerCommand,
    params: &SingleTrackParams,
    dt: f64,
) -> SingleTrackState {
    let x = state.to_vector();
    let u = DVector::from_row_slice(&[cmd.steer_rate, cmd.force_rate / FORCE_RATE_SCALE]);
    let next = ocp::rk4(|x, u| single_track_dot(x, u, params), &x, &u, dt);
    SingleTrackState::from_vector(&next)
}

/// Per-axle friction margins `mu Fz - sqrt(Fx_axle^2 + Fy_axle^2)`,
/// front then rear, at the state's current slip.
pub fn friction_circle_margin(state: &SingleTrackState, params: &SingleTrackParams) -> [f64; 2] {
    let sf = slip_front(state.vx, state.vy, state.yaw_rate, state.steering, params);
    let sr = slip_rear(state.vx, state.vy, state.yaw_rate, params);
    let fyf = fiala_lateral_force(sf.alpha, &params.front_tire);
    let fyr = fiala_lateral_force(sr.alpha, &params.rear_tire);
    let fxf = params.drive_split_front * state.fx;
    let fxr = (1.0 - params.drive_split_front) * state.fx;
    [
        params.front_tire.max_force() - fxf.hypot(fyf),
        params.rear_tire.max_force() - fxr.hypot(fyr),
    ]
}

/// Contouring cost weights (Eq.-style: contour, lag, velocity, input rates).
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
#[serde(default)]
pub struct TrackerWeights {
    pub q_contour: f64,
    pub q_lag: f64,
    pub q_velocity: f64,
    pub q_steer_rate: f64,
    pub q_force_rate: f64,
}

impl Default for TrackerWeights {
    fn default() -> Self {
        Self {
            q_contour: 8.0,
            q_lag: 4.0,
            q_velocity: 4.0,
            q_steer_rate: 2.0,
            q_force_rate: 2.0,
        }
    }
}

/// Spline reference with a speed profile over progress.
#[derive(Debug, Clone)]
pub struct TrackerReference {
    pub path: ReferencePath,
    /// (progress, speed) samples, progress strictly increasing.
    profile: Vec<(f64, f64)>,
}

impl TrackerReference {
    /// Build from the planner's trajectory; `None` when the plan is too
    /// short to define a direction (near standstill).
    pub fn from_plan(states: &[VehicleState]) -> Option<Self> {
        let mut waypoints: Vec<Waypoint> = Vec::new();
        let mut speeds: Vec<f64> = Vec::new();
        for st in states {
            let w = Waypoint::new(st.x, st.y);
            if waypoints
                .last()
                .map_or(true, |prev: &Waypoint| {
                    (w.x - prev.x).hypot(w.y - prev.y) > 1e-4
                })
            {
                waypoints.push(w);
                speeds.push(st.speed);
            } else if let Some(last) = speeds.last_mut() {
                *last = last.max(st.speed);
            }
        }
        if waypoints.len() < 2 {
            return None;
        }
        let span: f64 = waypoints
            .windows(2)
            .map(|w| (w[1].x - w[0].x).hypot(w[1].y - w[0].y))
            .sum();
        if span < 0.5 {
            return None;
        }
        let path = ReferencePath::fit(&waypoints).ok()?;
        let mut profile = Vec::with_capacity(speeds.len());
        let mut s = 0.0;
        for (i, w) in waypoints.iter().enumerate() {
            if i > 0 {
                let prev = waypoints[i - 1];
                s += (w.x - prev.x).hypot(w.y - prev.y);
            }
            profile.push((s.min(path.total_length()), speeds[i]));
        }
        Some(Self { path, profile })
    }

    /// Reference speed and its slope at progress `s` (piecewise linear).
    pub fn speed_at(&self, s: f64) -> (f64, f64) {
        let prof = &self.profile;
        if s <= prof[0].0 {
            return (prof[0].1, 0.0);
        }
        for w in prof.windows(2) {
            if s <= w[1].0 {
                let span = (w[1].0 - w[0].0).max(1e-9);
                let alpha = (s - w[0].0) / span;
                let slope = (w[1].1 - w[0].1) / span;
                return (w[0].1 + alpha * (w[1].1 - w[0].1), slope);
            }
        }
        (prof.last().unwrap().1, 0.0)
    }
}

/// One tracking instance over the controller horizon.
struct TrackerProblem<'a> {
    reference: &'a TrackerReference,
    weights: TrackerWeights,
    params: &'a SingleTrackParams,
    dt: f64,
    n: usize,
    x_init: DVector<f64>,
}

impl TrackerProblem<'_> {
    /// Normalized friction-circle rows (1 - |F|^2 / (mu Fz)^2 per axle)
    /// with Jacobians over the state.
    fn friction_rows(&self, x: &DVector<f64>) -> (DVector<f64>, DMatrix<f64>) {
        let p = self.params;
        let (vx, vy, r, delta, fx) = (x[3], x[4], x[5], x[6], x[7]);
        let sf = slip_front(vx, vy, r, delta, p);
        let sr = slip_rear(vx, vy, r, p);
        let fyf = fiala_lateral_force(sf.alpha, &p.front_tire);
        let fyr = fiala_lateral_force(sr.alpha, &p.rear_tire);
        let dfyf = fiala_lateral_force_derivative(sf.alpha, &p.front_tire);
        let dfyr = fiala_lateral_force_derivative(sr.alpha, &p.rear_tire);
        let fxf = p.drive_split_front * fx;
        let fxr = (1.0 - p.drive_split_front) * fx;
        let limit_f = p.front_tire.max_force().powi(2);
        let limit_r = p.rear_tire.max_force().powi(2);

        let g = DVector::from_row_slice(&[
            1.0 - (fxf * fxf + fyf * fyf) / limit_f,
            1.0 - (fxr * fxr + fyr * fyr) / limit_r,
        ]);
        let mut jx = DMatrix::zeros(2, 9);
        let cf = -2.0 * fyf * dfyf / limit_f;
        jx[(0, 3)] = cf * sf.d_vx;
        jx[(0, 4)] = cf * sf.d_vy;
        jx[(0, 5)] = cf * sf.d_r;
        jx[(0, 6)] = cf * sf.d_delta;
        jx[(0, 7)] = -2.0 * fxf * p.drive_split_front / limit_f;
        let cr = -2.0 * fyr * dfyr / limit_r;
        jx[(1, 3)] = cr * sr.d_vx;
        jx[(1, 4)] = cr * sr.d_vy;
        jx[(1, 5)] = cr * sr.d_r;
        jx[(1, 7)] = -2.0 * fxr * (1.0 - p.drive_split_front) / limit_r;
        (g, jx)
    }

    fn state_rows(&self, x: &DVector<f64>) -> (DVector<f64>, DMatrix<f64>) {
        let p = self.params;
        let mut g = DVector::zeros(4);
        let mut jx = DMatrix::zeros(4, 9);
        g[0] = (p.delta_max - x[6]) / p.delta_max;
        g[1] = (p.delta_max + x[6]) / p.delta_max;
        jx[(0, 6)] = -1.0 / p.delta_max;
        jx[(1, 6)] = 1.0 / p.delta_max;
        g[2] = (p.fx_max - x[7]) / p.fx_max;
        g[3] = (p.fx_max + x[7]) / p.fx_max;
        jx[(2, 7)] = -1.0 / p.fx_max;
        jx[(3, 7)] = 1.0 / p.fx_max;
        (g, jx)
    }
}

impl OcpModel for TrackerProblem<'_> {
    fn nx(&self) -> usize {
        9
    }
    fn nu(&self) -> usize {
        2
    }
    fn horizon(&self) -> usize {
        self.n
    }
    fn initial_state(&self) -> DVector<f64> {
        self.x_init.clone()
    }

    fn step(&self, _k: usize, x: &DVector<f64>, u: &DVector<f64>) -> DVector<f64> {
        ocp::rk4(|x, u| single_track_dot(x, u, self.params), x, u, self.dt)
    }

    fn step_jacobians(
        &self,
        _k: usize,
        x: &DVector<f64>,
        u: &DVector<f64>,
    ) -> (DMatrix<f64>, DMatrix<f64>) {
        let (_, a, b) = ocp::rk4_with_jacobians(
            |x, u| single_track_derivative(x, u, self.params),
            x,
            u,
            self.dt,
        );
        (a, b)
    }

    fn n_stage_residuals(&self) -> usize {
        5
    }

    fn stage_residuals(&self, _k: usize, x: &DVector<f64>, u: &DVector<f64>) -> DVector<f64> {
        let w = &self.weights;
        let jet = contour_jet(&self.reference.path, Vec2::new(x[0], x[1]), x[8]);
        let (v_ref, _) = self.reference.speed_at(x[8].clamp(0.0, self.reference.path.total_length()));
        DVector::from_row_slice(&[
            w.q_contour.sqrt() * jet.e_c,
            w.q_lag.sqrt() * jet.e_l,
            w.q_velocity.sqrt() * (x[3] - v_ref),
            w.q_steer_rate.sqrt() * u[0],
            w.q_force_rate.sqrt() * u[1],
        ])
    }

    fn stage_residual_jacobians(
        &self,
        _k: usize,
        x: &DVector<f64>,
        _u: &DVector<f64>,
    ) -> (DMatrix<f64>, DMatrix<f64>) {
        let w = &self.weights;
        let jet = contour_jet(&self.reference.path, Vec2::new(x[0], x[1]), x[8]);
        let total = self.reference.path.total_length();
        let clamped = x[8] < 0.0 || x[8] > total;
        let (_, slope) = self.reference.speed_at(x[8].clamp(0.0, total));
        let mut jx = DMatrix::zeros(5, 9);
        let sq_c = w.q_contour.sqrt();
        let sq_l = w.q_lag.sqrt();
        jx[(0, 0)] = sq_c * jet.normal.x;
        jx[(0, 1)] = sq_c * jet.normal.y;
        jx[(0, 8)] = sq_c * jet.de_c_ds;
        jx[(1, 0)] = sq_l * jet.tangent.x;
        jx[(1, 1)] = sq_l * jet.tangent.y;
        jx[(1, 8)] = sq_l * jet.de_l_ds;
        jx[(2, 3)] = w.q_velocity.sqrt();
        jx[(2, 8)] = if clamped {
            0.0
        } else {
            -w.q_velocity.sqrt() * slope
        };
        let mut ju = DMatrix::zeros(5, 2);
        ju[(3, 0)] = w.q_steer_rate.sqrt();
        ju[(4, 1)] = w.q_force_rate.sqrt();
        (jx, ju)
    }

    fn n_terminal_residuals(&self) -> usize {
        3
    }

    fn terminal_residuals(&self, x: &DVector<f64>) -> DVector<f64> {
        let w = &self.weights;
        let jet = contour_jet(&self.reference.path, Vec2::new(x[0], x[1]), x[8]);
        let (v_ref, _) = self
            .reference
            .speed_at(x[8].clamp(0.0, self.reference.path.total_length()));
        DVector::from_row_slice(&[
            w.q_contour.sqrt() * jet.e_c,
            w.q_lag.sqrt() * jet.e_l,
            w.q_velocity.sqrt() * (x[3] - v_ref),
        ])
    }

    fn terminal_residual_jacobian(&self, x: &DVector<f64>) -> DMatrix<f64> {
        let w = &self.weights;
        let jet = contour_jet(&self.reference.path, Vec2::new(x[0], x[1]), x[8]);
        let total = self.reference.path.total_length();
        let clamped = x[8] < 0.0 || x[8] > total;
        let (_, slope) = self.reference.speed_at(x[8].clamp(0.0, total));
        let mut jx = DMatrix::zeros(3, 9);
        let sq_c = w.q_contour.sqrt();
        let sq_l = w.q_lag.sqrt();
        jx[(0, 0)] = sq_c * jet.normal.x;
        jx[(0, 1)] = sq_c * jet.normal.y;
        jx[(0, 8)] = sq_c * jet.de_c_ds;
        jx[(1, 0)] = sq_l * jet.tangent.x;
        jx[(1, 1)] = sq_l * jet.tangent.y;
        jx[(1, 8)] = sq_l * jet.de_l_ds;
        jx[(2, 3)] = w.q_velocity.sqrt();
        jx[(2, 8)] = if clamped {
            0.0
        } else {
            -w.q_velocity.sqrt() * slope
        };
        jx
    }

    fn n_stage_ineq(&self, k: usize) -> usize {
        if k == 0 {
            4
        } else {
            4 + 4 + 2
        }
    }

    fn stage_ineq(&self, k: usize, x: &DVector<f64>, u: &DVector<f64>) -> DVector<f64> {
        let p = self.params;
        let mut g = vec![
            1.0 - u[0] / p.steer_rate_max,
            1.0 + u[0] / p.steer_rate_max,
            1.0 - u[1] * FORCE_RATE_SCALE / p.fx_rate_max,
            1.0 + u[1] * FORCE_RATE_SCALE / p.fx_rate_max,
        ];
        if k > 0 {
            let (state_rows, _) = self.state_rows(x);
            g.extend(state_rows.iter());
            let (friction, _) = self.friction_rows(x);
            g.extend(friction.iter());
        }
        DVector::from_vec(g)
    }

    fn stage_ineq_jacobians(
        &self,
        k: usize,
        x: &DVector<f64>,
        _u: &DVector<f64>,
    ) -> (DMatrix<f64>, DMatrix<f64>) {
        let p = self.params;
        let rows = self.n_stage_ineq(k);
        let mut gx = DMatrix::zeros(rows, 9);
        let mut gu = DMatrix::zeros(rows, 2);
        gu[(0, 0)] = -1.0 / p.steer_rate_max;
        gu[(1, 0)] = 1.0 / p.steer_rate_max;
        gu[(2, 1)] = -FORCE_RATE_SCALE / p.fx_rate_max;
        gu[(3, 1)] = FORCE_RATE_SCALE / p.fx_rate_max;
        if k > 0 {
            let (_, state_jx) = self.state_rows(x);
            gx.view_mut((4, 0), (4, 9)).copy_from(&state_jx);
            let (_, friction_jx) = self.friction_rows(x);
            gx.view_mut((8, 0), (2, 9)).copy_from(&friction_jx);
        }
        (gx, gu)
    }

    fn stage_ineq_soft(&self, k: usize) -> Vec<bool> {
        let mut soft = vec![false; self.n_stage_ineq(k)];
        if k > 0 {
            soft[8] = true;
            soft[9] = true;
        }
        soft
    }

    fn n_terminal_ineq(&self) -> usize {
        6
    }

    fn terminal_ineq(&self, x: &DVector<f64>) -> DVector<f64> {
        let (state_rows, _) = self.state_rows(x);
        let (friction, _) = self.friction_rows(x);
        let mut g = state_rows.iter().copied().collect::<Vec<f64>>();
        g.extend(friction.iter());
        DVector::from_vec(g)
    }

    fn terminal_ineq_jacobian(&self, x: &DVector<f64>) -> DMatrix<f64> {
        let mut gx = DMatrix::zeros(6, 9);
        let (_, state_jx) = self.state_rows(x);
        gx.view_mut((0, 0), (4, 9)).copy_from(&state_jx);
        let (_, friction_jx) = self.friction_rows(x);
        gx.view_mut((4, 0), (2, 9)).copy_from(&friction_jx);
        gx
    }

    fn terminal_ineq_soft(&self) -> Vec<bool> {
        vec![false, false, false, false, true, true]
    }
}

/// Controller outcome: the next command plus a degraded flag when the
/// solver failed and the previous command was held.
#[derive(Debug, Clone, Copy)]
pub struct TrackerOutcome {
    pub command: TrackerCommand,
    pub degraded: bool,
}

/// Receding-horizon contouring tracker. Holds its warm start across calls.
pub struct MpccController {
    pub weights: TrackerWeights,
    pub params: SingleTrackParams,
    pub horizon: usize,
    /// [s]
    pub dt: f64,
    pub sqp: SqpOptions,
    prev: Option<(Vec<DVector<f64>>, Vec<DVector<f64>>)>,
    last_command: TrackerCommand,
}

impl MpccController {
    pub fn new(weights: TrackerWeights, params: SingleTrackParams) -> Self {
        Self {
            weights,
            params,
            // Two seconds of preview: a lateral offset of half a meter at
            // benchmark speeds cannot be closed within one second without
            // saturating the steering, which destabilizes the loop.
            horizon: 40,
            dt: 0.05,
            sqp: SqpOptions {
                max_iter: 12,
                ..SqpOptions::default()
            },
            prev: None,
            last_command: TrackerCommand::ZERO,
        }
    }

    /// Solve one tracking step; the reference is the planner's selected
    /// trajectory (or `None` near standstill, which commands a gentle stop).
    pub fn solve(
        &mut self,
        state: &SingleTrackState,
        reference: Option<&TrackerReference>,
    ) -> TrackerOutcome {
        let Some(reference) = reference else {
            let command = self.stop_command(state);
            self.last_command = command;
            return TrackerOutcome {
                command,
                degraded: false,
            };
        };

        let mut x_init = state.to_vector();
        x_init[8] = reference.path.project(state.position(), state.progress).s;

        let problem = TrackerProblem {
            reference,
            weights: self.weights,
            params: &self.params,
            dt: self.dt,
            n: self.horizon,
            x_init: x_init.clone(),
        };
        let mut problem = problem;

        // Warm start: shift the previous solution or coast.
        let (warm_states, warm_inputs) = match self.prev.take() {
            Some((mut ws, mut wu)) if ws.len() == self.horizon + 1 => {
                wu.rotate_left(1);
                let last = wu.last().cloned().unwrap_or_else(|| DVector::zeros(2));
                *wu.last_mut().unwrap() = last;
                ws[0] = x_init.clone();
                for k in 0..self.horizon {
                    ws[k + 1] = problem.step(k, &ws[k], &wu[k]);
                }
                (ws, wu)
            }
            _ => {
                let wu = vec![DVector::zeros(2); self.horizon];
                let mut ws = vec![x_init.clone()];
                for k in 0..self.horizon {
                    let next = problem.step(k, &ws[k], &wu[k]);
                    ws.push(next);
                }
                (ws, wu)
            }
        };

        let sol = ocp::solve_sqp(&mut problem, &warm_states, &warm_inputs, &self.sqp);
        if sol.feasible {
            let command = TrackerCommand {
                steer_rate: sol.inputs[0][0],
                force_rate: sol.inputs[0][1] * FORCE_RATE_SCALE,
            };
            self.prev = Some((sol.states, sol.inputs));
            self.last_command = command;
            TrackerOutcome {
                command,
                degraded: false,
            }
        } else {
            // Hold the previous command, flagged.
            self.prev = None;
            TrackerOutcome {
                command: self.last_command,
                degraded: true,
            }
        }
    }

    fn stop_command(&self, state: &SingleTrackState) -> TrackerCommand {
        let target_fx = if state.vx > 0.05 { -1500.0 } else { 0.0 };
        TrackerCommand {
            steer_rate: (-state.steering / self.dt)
                .clamp(-self.params.steer_rate_max, self.params.steer_rate_max),
            force_rate: ((target_fx - state.fx) / self.dt)
                .clamp(-self.params.fx_rate_max, self.params.fx_rate_max),
        }
    }
}

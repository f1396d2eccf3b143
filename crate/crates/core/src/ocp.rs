//! Stage-structured nonlinear optimal control problems and a condensed
//! Gauss-Newton SQP solver.
//!
//! A problem has states `x_0..x_N` and inputs `u_0..u_{N-1}` with `x_0`
//! pinned to the initial state. The objective is a sum of squared weighted
//! residuals; inequalities are `g(x, u) >= 0`. Each SQP iteration
//! linearizes dynamics, residuals and inequalities about the current
//! trajectory, eliminates the state deviations through the dynamics
//! sensitivities, and solves the resulting dense QP over the input
//! deviations with [`crate::qp`]. Steps are globalized by a backtracking
//! line search on an l1 merit function.

use nalgebra::{DMatrix, DVector};

use crate::qp;

/// Stage-structured problem description consumed by [`solve_sqp`].
///
/// `prepare` runs once per SQP iteration before any residual or inequality
/// query; models that generate constraints from the current trajectory
/// (e.g. linearized collision half-planes) refresh them there.
pub trait OcpModel {
    fn nx(&self) -> usize;
    fn nu(&self) -> usize;
    fn horizon(&self) -> usize;
    fn initial_state(&self) -> DVector<f64>;

    /// Discrete dynamics `x_{k+1} = F(x_k, u_k)`.
    fn step(&self, k: usize, x: &DVector<f64>, u: &DVector<f64>) -> DVector<f64>;
    /// Jacobians of `step` with respect to `x` and `u`.
    fn step_jacobians(&self, k: usize, x: &DVector<f64>, u: &DVector<f64>)
        -> (DMatrix<f64>, DMatrix<f64>);

    fn prepare(&mut self, _states: &[DVector<f64>], _inputs: &[DVector<f64>]) {}

    /// Number of weighted residuals per running stage.
    fn n_stage_residuals(&self) -> usize;
    fn stage_residuals(&self, k: usize, x: &DVector<f64>, u: &DVector<f64>) -> DVector<f64>;
    fn stage_residual_jacobians(
        &self,
        k: usize,
        x: &DVector<f64>,
        u: &DVector<f64>,
    ) -> (DMatrix<f64>, DMatrix<f64>);

    fn n_terminal_residuals(&self) -> usize;
    fn terminal_residuals(&self, x: &DVector<f64>) -> DVector<f64>;
    fn terminal_residual_jacobian(&self, x: &DVector<f64>) -> DMatrix<f64>;

    /// Number of inequality rows `g >= 0` at running stage `k`.
    fn n_stage_ineq(&self, k: usize) -> usize;
    fn stage_ineq(&self, k: usize, x: &DVector<f64>, u: &DVector<f64>) -> DVector<f64>;
    fn stage_ineq_jacobians(
        &self,
        k: usize,
        x: &DVector<f64>,
        u: &DVector<f64>,
    ) -> (DMatrix<f64>, DMatrix<f64>);
    /// Rows eligible for the shared slack in the soft-constraint retry.
    fn stage_ineq_soft(&self, k: usize) -> Vec<bool> {
        vec![false; self.n_stage_ineq(k)]
    }
    /// Mutual-redundancy groups: rows sharing a group id are near-parallel
    /// alternatives (e.g. footprint discs against one obstacle) and only
    /// the most binding of them enters the QP each iteration. `usize::MAX`
    /// means ungrouped. All rows still count in the merit function and the
    /// final feasibility evaluation.
    fn stage_ineq_group(&self, k: usize) -> Vec<usize> {
        vec![usize::MAX; self.n_stage_ineq(k)]
    }

    fn n_terminal_ineq(&self) -> usize;
    fn terminal_ineq(&self, x: &DVector<f64>) -> DVector<f64>;
    fn terminal_ineq_jacobian(&self, x: &DVector<f64>) -> DMatrix<f64>;
    fn terminal_ineq_soft(&self) -> Vec<bool> {
        vec![false; self.n_terminal_ineq()]
    }
    fn terminal_ineq_group(&self) -> Vec<usize> {
        vec![usize::MAX; self.n_terminal_ineq()]
    }
}

#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
#[serde(default)]
pub struct SqpOptions {
    pub max_iter: usize,
    /// Stationarity tolerance on the condensed KKT residual.
    pub tol: f64,
    /// Inequality violation accepted as feasible.
    pub feas_tol: f64,
    /// Dynamics defect required before declaring convergence.
    pub defect_tol: f64,
    /// Quadratic weight of the shared slack that relaxes soft rows when the
    /// hard constraint set is inconsistent.
    pub slack_penalty: f64,
    /// Levenberg regularization added to the condensed Hessian.
    pub reg: f64,
    pub max_line_search: usize,
    /// Inequality rows whose value exceeds this gap at the linearization
    /// point are screened out of the QP (still enforced through the merit
    /// function, the next linearization, and the final feasibility check).
    pub screen_gap: f64,
}

impl Default for SqpOptions {
    fn default() -> Self {
        Self {
            max_iter: 20,
            tol: 1e-4,
            feas_tol: 1e-4,
            defect_tol: 1e-8,
            slack_penalty: 1e4,
            reg: 1e-8,
            max_line_search: 10,
            screen_gap: 2.0,
        }
    }
}

#[derive(Debug, Clone)]
pub struct SqpSolution {
    pub states: Vec<DVector<f64>>,
    pub inputs: Vec<DVector<f64>>,
    /// Objective value (sum of squared residuals) at the returned trajectory.
    pub cost: f64,
    /// All inequalities satisfied within `feas_tol` at the returned
    /// trajectory (whose states are an exact rollout of the inputs).
    pub feasible: bool,
    pub kkt_residual: f64,
    pub iterations: usize,
    /// The QP needed the soft-constraint retry at least once.
    pub soft_retry: bool,
    /// Worst inequality violation at the returned trajectory.
    pub max_violation: f64,
    /// (before, after) l1 merit value per accepted iteration.
    pub merit_history: Vec<(f64, f64)>,
}

struct Linearization {
    /// Sensitivities `dx_k/du` (one `nx x M` block per state index).
    sens: Vec<DMatrix<f64>>,
    /// Affine defect response `w_k`.
    affine: Vec<DVector<f64>>,
    defects: Vec<DVector<f64>>,
}

fn linearize_dynamics<M: OcpModel>(
    model: &M,
    states: &[DVector<f64>],
    inputs: &[DVector<f64>],
) -> Linearization {
    let n = model.horizon();
    let nx = model.nx();
    let nu = model.nu();
    let m = n * nu;
    let mut sens = Vec::with_capacity(n + 1);
    let mut affine = Vec::with_capacity(n + 1);
    let mut defects = Vec::with_capacity(n);
    sens.push(DMatrix::zeros(nx, m));
    affine.push(DVector::zeros(nx));
    for k in 0..n {
        let (a, b) = model.step_jacobians(k, &states[k], &inputs[k]);
        let predicted = model.step(k, &states[k], &inputs[k]);
        let defect = &predicted - &states[k + 1];
        let mut s_next = &a * &sens[k];
        s_next.view_mut((0, k * nu), (nx, nu)).copy_from(&b);
        let w_next = &a * &affine[k] + &defect;
        sens.push(s_next);
        affine.push(w_next);
        defects.push(defect);
    }
    Linearization {
        sens,
        affine,
        defects,
    }
}

fn eval_cost<M: OcpModel>(model: &M, states: &[DVector<f64>], inputs: &[DVector<f64>]) -> f64 {
    let n = model.horizon();
    let mut cost = 0.0;
    for k in 0..n {
        cost += model.stage_residuals(k, &states[k], &inputs[k]).norm_squared();
    }
    cost + model.terminal_residuals(&states[n]).norm_squared()
}

fn eval_violation<M: OcpModel>(
    model: &M,
    states: &[DVector<f64>],
    inputs: &[DVector<f64>],
) -> (f64, f64) {
    let n = model.horizon();
    let mut l1 = 0.0;
    let mut linf: f64 = 0.0;
    for k in 0..n {
        for v in model.stage_ineq(k, &states[k], &inputs[k]).iter() {
            let viol = (-v).max(0.0);
            l1 += viol;
            linf = linf.max(viol);
        }
    }
    for v in model.terminal_ineq(&states[n]).iter() {
        let viol = (-v).max(0.0);
        l1 += viol;
        linf = linf.max(viol);
    }
    (l1, linf)
}

fn merit<M: OcpModel>(
    model: &M,
    states: &[DVector<f64>],
    inputs: &[DVector<f64>],
    mu: f64,
) -> f64 {
    let n = model.horizon();
    let mut defect_l1 = 0.0;
    for k in 0..n {
        let d = model.step(k, &states[k], &inputs[k]) - &states[k + 1];
        defect_l1 += d.iter().map(|v| v.abs()).sum::<f64>();
    }
    let (viol_l1, _) = eval_violation(model, states, inputs);
    eval_cost(model, states, inputs) + mu * (defect_l1 + viol_l1)
}

/// Solve the problem by condensed Gauss-Newton SQP from a warm-start
/// trajectory. States of the returned solution are re-rolled through the
/// exact dynamics so they reproduce under re-simulation.
pub fn solve_sqp<M: OcpModel>(
    model: &mut M,
    warm_states: &[DVector<f64>],
    warm_inputs: &[DVector<f64>],
    opts: &SqpOptions,
) -> SqpSolution {
    let n = model.horizon();
    let nu = model.nu();
    let m = n * nu;
    assert_eq!(warm_states.len(), n + 1, "warm start needs N+1 states");
    assert_eq!(warm_inputs.len(), n, "warm start needs N inputs");

    let mut states: Vec<DVector<f64>> = warm_states.to_vec();
    let mut inputs: Vec<DVector<f64>> = warm_inputs.to_vec();
    states[0] = model.initial_state();

    let mut soft_retry = false;
    let mut merit_history = Vec::new();
    let mut kkt_residual = f64::INFINITY;
    let mut mu: f64 = 1.0;
    let mut iterations = 0;

    let timing = std::env::var("SQP_TIMING").is_ok();
    while iterations < opts.max_iter {
        iterations += 1;
        let t0 = std::time::Instant::now();
        model.prepare(&states, &inputs);
        let lin = linearize_dynamics(model, &states, &inputs);
        if timing {
            eprintln!("  prep+lin: {:.3} ms", t0.elapsed().as_secs_f64() * 1e3);
        }
        let t0 = std::time::Instant::now();

        // Condensed residual system: rows of `big_g` act on du.
        let n_res = n * model.n_stage_residuals() + model.n_terminal_residuals();
        let mut big_g = DMatrix::zeros(n_res, m);
        let mut res0 = DVector::zeros(n_res);
        let mut row = 0;
        for k in 0..n {
            let r = model.stage_residuals(k, &states[k], &inputs[k]);
            let (jx, ju) = model.stage_residual_jacobians(k, &states[k], &inputs[k]);
            let block = &jx * &lin.sens[k];
            let offset = &r + &jx * &lin.affine[k];
            let nr = r.len();
            big_g.view_mut((row, 0), (nr, m)).copy_from(&block);
            big_g
                .view_mut((row, k * nu), (nr, nu))
                .add_assign_helper(&ju);
            res0.rows_mut(row, nr).copy_from(&offset);
            row += nr;
        }
        {
            let r = model.terminal_residuals(&states[n]);
            let jx = model.terminal_residual_jacobian(&states[n]);
            let block = &jx * &lin.sens[n];
            let offset = &r + &jx * &lin.affine[n];
            let nr = r.len();
            big_g.view_mut((row, 0), (nr, m)).copy_from(&block);
            res0.rows_mut(row, nr).copy_from(&offset);
        }

        // Condensed inequalities (screened): one extra decision variable, a
        // shared nonnegative slack on the soft rows, keeps the QP feasible
        // when the hard set is inconsistent.
        let me = m + 1;
        let mut c_data: Vec<f64> = Vec::new();
        let mut rhs_data: Vec<f64> = Vec::new();
        let mut append_rows = |g: &DVector<f64>,
                               block: &DMatrix<f64>,
                               gu: Option<(&DMatrix<f64>, usize)>,
                               offset: &DVector<f64>,
                               soft: &[bool],
                               group: &[usize]| {
            // Per group, keep only the most binding row this iteration.
            let mut group_pick: Vec<(usize, usize, f64)> = Vec::new();
            for i in 0..g.len() {
                if group[i] == usize::MAX {
                    continue;
                }
                match group_pick.iter_mut().find(|(gid, _, _)| *gid == group[i]) {
                    Some(entry) => {
                        if g[i] < entry.2 {
                            entry.1 = i;
                            entry.2 = g[i];
                        }
                    }
                    None => group_pick.push((group[i], i, g[i])),
                }
            }
            for i in 0..g.len() {
                if g[i] > opts.screen_gap {
                    continue;
                }
                if group[i] != usize::MAX
                    && !group_pick.iter().any(|(_, pick, _)| *pick == i)
                {
                    continue;
                }
                let start = c_data.len();
                c_data.extend(std::iter::repeat(0.0).take(me));
                let row = &mut c_data[start..start + me];
                for c in 0..m {
                    row[c] = block[(i, c)];
                }
                if let Some((gu, k)) = gu {
                    for c in 0..nu {
                        row[k * nu + c] += gu[(i, c)];
                    }
                }
                if soft[i] {
                    row[m] = 1.0;
                }
                rhs_data.push(-offset[i]);
            }
        };
        for k in 0..n {
            if model.n_stage_ineq(k) == 0 {
                continue;
            }
            let g = model.stage_ineq(k, &states[k], &inputs[k]);
            let (gx, gu) = model.stage_ineq_jacobians(k, &states[k], &inputs[k]);
            let block = &gx * &lin.sens[k];
            let offset = &g + &gx * &lin.affine[k];
            append_rows(
                &g,
                &block,
                Some((&gu, k)),
                &offset,
                &model.stage_ineq_soft(k),
                &model.stage_ineq_group(k),
            );
        }
        if model.n_terminal_ineq() > 0 {
            let g = model.terminal_ineq(&states[n]);
            let gx = model.terminal_ineq_jacobian(&states[n]);
            let block = &gx * &lin.sens[n];
            let offset = &g + &gx * &lin.affine[n];
            append_rows(
                &g,
                &block,
                None,
                &offset,
                &model.terminal_ineq_soft(),
                &model.terminal_ineq_group(),
            );
        }
        // Slack nonnegativity.
        {
            let start = c_data.len();
            c_data.extend(std::iter::repeat(0.0).take(me));
            c_data[start + m] = 1.0;
            rhs_data.push(0.0);
        }
        let n_rows = rhs_data.len();
        let c_rows = DMatrix::from_row_slice(n_rows, me, &c_data);
        let rhs = DVector::from_vec(rhs_data);

        // Gauss-Newton data, extended by the slack variable.
        let mut hess = DMatrix::zeros(me, me);
        hess.view_mut((0, 0), (m, m))
            .copy_from(&(big_g.tr_mul(&big_g) * 2.0));
        for i in 0..m {
            hess[(i, i)] += opts.reg.max(1e-12);
        }
        hess[(m, m)] = 2.0 * opts.slack_penalty;
        let mut grad = DVector::zeros(me);
        grad.rows_mut(0, m).copy_from(&(big_g.tr_mul(&res0) * 2.0));
        grad[m] = opts.slack_penalty;
        if timing {
            eprintln!("  build: {:.3} ms", t0.elapsed().as_secs_f64() * 1e3);
        }
        let t0 = std::time::Instant::now();

        let qp_sol = match qp::solve(&hess, &grad, &c_rows, &rhs) {
            Ok(sol) => sol,
            Err(_) => break,
        };
        if timing {
            eprintln!(
                "  qp: {:.3} ms ({:?}, {} iterations, {n_rows} rows, slack {:.2e})",
                t0.elapsed().as_secs_f64() * 1e3,
                qp_sol.status,
                qp_sol.iterations,
                qp_sol.x[m],
            );
        }
        let t0 = std::time::Instant::now();
        if qp_sol.x[m] > opts.feas_tol {
            soft_retry = true;
        }
        let du = qp_sol.x.rows(0, m).into_owned();
        let duals = qp_sol.duals;

        // Condensed stationarity gap at the current iterate.
        let stationarity = (hess.view((0, 0), (m, m)) * &du).amax();
        let defect_inf = lin
            .defects
            .iter()
            .map(|d| d.amax())
            .fold(0.0_f64, f64::max);
        let (_, viol_inf) = eval_violation(model, &states, &inputs);
        kkt_residual = stationarity.max(viol_inf).max(defect_inf);

        if kkt_residual <= opts.tol && defect_inf <= opts.defect_tol && viol_inf <= opts.feas_tol
        {
            break;
        }
        if du.amax() <= 1e-7 && defect_inf <= opts.defect_tol {
            // Negligible step: converged or pinned by the active set.
            break;
        }

        // l1 merit line search along (dx(alpha), du(alpha)).
        mu = mu.max(1.5 * duals.amax()).max(1.0);
        let mut stalled = false;
        let merit0 = merit(model, &states, &inputs, mu);
        let descent = grad.rows(0, m).dot(&du)
            - mu * (lin.defects.iter().map(|d| d.iter().map(|v| v.abs()).sum::<f64>()).sum::<f64>());
        let mut alpha = 1.0;
        let mut accepted = false;
        for _ in 0..=opts.max_line_search {
            let mut trial_states = states.clone();
            let mut trial_inputs = inputs.clone();
            for k in 0..n {
                let delta_u = du.rows(k * nu, nu) * alpha;
                trial_inputs[k] += delta_u;
            }
            for k in 1..=n {
                let delta_x = (&lin.sens[k] * &du + &lin.affine[k]) * alpha;
                trial_states[k] += delta_x;
            }
            let trial_merit = merit(model, &trial_states, &trial_inputs, mu);
            let threshold = merit0 + 1e-4 * alpha * descent.min(0.0);
            if trial_merit <= threshold + 1e-12 {
                merit_history.push((merit0, trial_merit));
                states = trial_states;
                inputs = trial_inputs;
                accepted = true;
                // Stalled progress: accept the iterate and stop grinding.
                if merit0 - trial_merit <= 1e-8 * (1.0 + merit0.abs())
                    && defect_inf <= opts.feas_tol
                {
                    stalled = true;
                }
                break;
            }
            alpha *= 0.5;
        }
        if timing {
            eprintln!(
                "  linesearch: {:.3} ms (alpha {alpha}, accepted {accepted})",
                t0.elapsed().as_secs_f64() * 1e3
            );
        }
        if !accepted || stalled {
            break;
        }
    }

    // Final trajectory: exact rollout of the inputs so feasibility and cost
    // are evaluated on what a re-simulation produces.
    let mut rolled = Vec::with_capacity(n + 1);
    rolled.push(model.initial_state());
    for k in 0..n {
        let next = model.step(k, &rolled[k], &inputs[k]);
        rolled.push(next);
    }
    model.prepare(&rolled, &inputs);
    let cost = eval_cost(model, &rolled, &inputs);
    let (_, max_violation) = eval_violation(model, &rolled, &inputs);
    SqpSolution {
        feasible: max_violation <= opts.feas_tol,
        states: rolled,
        inputs,
        cost,
        kkt_residual,
        iterations,
        soft_retry,
        max_violation,
        merit_history,
    }
}

/// Worst relative error between the model's analytic Jacobians and central
/// finite differences at the given trajectory. Covers dynamics, residual,
/// and inequality Jacobians for both stage and terminal terms.
pub fn max_jacobian_error<M: OcpModel>(
    model: &mut M,
    states: &[DVector<f64>],
    inputs: &[DVector<f64>],
) -> f64 {
    let n = model.horizon();
    let h = 1e-6;
    model.prepare(states, inputs);
    let mut worst: f64 = 0.0;
    let mut record = |analytic: &DMatrix<f64>, fd: &DMatrix<f64>| {
        let scale = fd.amax().max(1.0);
        let err = (analytic - fd).amax() / scale;
        worst = worst.max(err);
    };

    let fd_matrix = |f: &dyn Fn(&DVector<f64>) -> DVector<f64>, at: &DVector<f64>| {
        let rows = f(at).len();
        let mut out = DMatrix::zeros(rows, at.len());
        for j in 0..at.len() {
            let mut hi = at.clone();
            let mut lo = at.clone();
            hi[j] += h;
            lo[j] -= h;
            let diff = (f(&hi) - f(&lo)) / (2.0 * h);
            out.column_mut(j).copy_from(&diff);
        }
        out
    };

    for k in 0..n {
        let (x, u) = (&states[k], &inputs[k]);
        let (ax, au) = model.step_jacobians(k, x, u);
        record(&ax, &fd_matrix(&|xx| model.step(k, xx, u), x));
        record(&au, &fd_matrix(&|uu| model.step(k, x, uu), u));

        if model.n_stage_residuals() > 0 {
            let (jx, ju) = model.stage_residual_jacobians(k, x, u);
            record(&jx, &fd_matrix(&|xx| model.stage_residuals(k, xx, u), x));
            record(&ju, &fd_matrix(&|uu| model.stage_residuals(k, x, uu), u));
        }
        if model.n_stage_ineq(k) > 0 {
            let (gx, gu) = model.stage_ineq_jacobians(k, x, u);
            record(&gx, &fd_matrix(&|xx| model.stage_ineq(k, xx, u), x));
            record(&gu, &fd_matrix(&|uu| model.stage_ineq(k, x, uu), u));
        }
    }
    let xn = &states[n];
    if model.n_terminal_residuals() > 0 {
        let jx = model.terminal_residual_jacobian(xn);
        record(&jx, &fd_matrix(&|xx| model.terminal_residuals(xx), xn));
    }
    if model.n_terminal_ineq() > 0 {
        let gx = model.terminal_ineq_jacobian(xn);
        record(&gx, &fd_matrix(&|xx| model.terminal_ineq(xx), xn));
    }
    worst
}

/// Classic RK4 step for `xdot = f(x, u)`, values only.
pub fn rk4<F>(f: F, x: &DVector<f64>, u: &DVector<f64>, dt: f64) -> DVector<f64>
where
    F: Fn(&DVector<f64>, &DVector<f64>) -> DVector<f64>,
{
    let k1 = f(x, u);
    let k2 = f(&(x + &k1 * (dt / 2.0)), u);
    let k3 = f(&(x + &k2 * (dt / 2.0)), u);
    let k4 = f(&(x + &k3 * dt), u);
    x + (k1 + k2 * 2.0 + k3 * 2.0 + k4) * (dt / 6.0)
}

/// Classic RK4 step for `xdot = f(x, u)` that also propagates the step
/// Jacobians through the integration stages. `f` returns the derivative
/// together with its Jacobians with respect to `x` and `u`.
pub fn rk4_with_jacobians<F>(
    f: F,
    x: &DVector<f64>,
    u: &DVector<f64>,
    dt: f64,
) -> (DVector<f64>, DMatrix<f64>, DMatrix<f64>)
where
    F: Fn(&DVector<f64>, &DVector<f64>) -> (DVector<f64>, DMatrix<f64>, DMatrix<f64>),
{
    let nx = x.len();
    let eye = DMatrix::<f64>::identity(nx, nx);

    let (k1, a1, b1) = f(x, u);
    let dk1_dx = a1;
    let dk1_du = b1;

    let x2 = x + &k1 * (dt / 2.0);
    let (k2, a2, b2) = f(&x2, u);
    let dk2_dx = &a2 * (&eye + &dk1_dx * (dt / 2.0));
    let dk2_du = &a2 * (&dk1_du * (dt / 2.0)) + b2;

    let x3 = x + &k2 * (dt / 2.0);
    let (k3, a3, b3) = f(&x3, u);
    let dk3_dx = &a3 * (&eye + &dk2_dx * (dt / 2.0));
    let dk3_du = &a3 * (&dk2_du * (dt / 2.0)) + b3;

    let x4 = x + &k3 * dt;
    let (k4, a4, b4) = f(&x4, u);
    let dk4_dx = &a4 * (&eye + &dk3_dx * dt);
    let dk4_du = &a4 * (&dk3_du * dt) + b4;

    let next = x + (k1 + &k2 * 2.0 + &k3 * 2.0 + k4) * (dt / 6.0);
    let a = &eye + (dk1_dx + dk2_dx * 2.0 + dk3_dx * 2.0 + dk4_dx) * (dt / 6.0);
    let b = (dk1_du + dk2_du * 2.0 + dk3_du * 2.0 + dk4_du) * (dt / 6.0);
    (next, a, b)
}

/// Tiny extension trait: in-place `+=` for matrix views.
trait AddAssignHelper {
    fn add_assign_helper(&mut self, other: &DMatrix<f64>);
}
impl AddAssignHelper for nalgebra::DMatrixViewMut<'_, f64> {
    fn add_assign_helper(&mut self, other: &DMatrix<f64>) {
        *self += other;
    }
}

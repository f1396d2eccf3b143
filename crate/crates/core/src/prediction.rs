//! Constant-velocity propagation of obstacle states and their Gaussian
//! uncertainty over the planning horizon.

use nalgebra::{Matrix2, Matrix4};
use serde::{Deserialize, Serialize};

use crate::{Error, Result, Vec2};

/// Tracked obstacle snapshot: position/velocity mean with a joint 4x4
/// covariance ordered `(px, py, vx, vy)`.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ObstacleState {
    pub id: u32,
    /// [m]
    pub position: Vec2,
    /// [m/s]
    pub velocity: Vec2,
    /// [m]
    pub radius: f64,
    pub covariance: Matrix4<f64>,
}

impl ObstacleState {
    /// Deterministic obstacle (zero covariance).
    pub fn deterministic(id: u32, position: Vec2, velocity: Vec2, radius: f64) -> Self {
        Self {
            id,
            position,
            velocity,
            radius,
            covariance: Matrix4::zeros(),
        }
    }
}

/// Per-obstacle sequence of predicted position means and 2x2 position
/// covariances, one entry per step `0..=horizon`.
#[derive(Debug, Clone)]
pub struct GaussianPrediction {
    pub obstacle_id: u32,
    pub radius: f64,
    pub means: Vec<Vec2>,
    pub covariances: Vec<Matrix2<f64>>,
    /// Terminal joint covariance; carried so extension can continue the
    /// recursion exactly.
    terminal_covariance: Matrix4<f64>,
    dt: f64,
    q_accel: f64,
}

impl GaussianPrediction {
    /// Horizon step count (`means.len() - 1`).
    pub fn horizon(&self) -> usize {
        self.means.len() - 1
    }

    pub fn dt(&self) -> f64 {
        self.dt
    }
}

/// How to continue a prediction beyond its original horizon.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ExtendPolicy {
    /// Freeze the covariance at its last value.
    HoldCovariance,
    /// Keep integrating the process noise.
    Grow,
}

/// Constant-velocity transition over one step.
fn transition(dt: f64) -> Matrix4<f64> {
    let mut f = Matrix4::identity();
    f[(0, 2)] = dt;
    f[(1, 3)] = dt;
    f
}

/// Discrete white-noise acceleration covariance for one step: each axis gets
/// the block `q * [[dt^4/4, dt^3/2], [dt^3/2, dt^2]]` over (position, velocity).
fn process_noise(dt: f64, q_accel: f64) -> Matrix4<f64> {
    let d2 = dt * dt;
    let d3 = d2 * dt;
    let d4 = d3 * dt;
    let mut q = Matrix4::zeros();
    q[(0, 0)] = d4 / 4.0;
    q[(1, 1)] = d4 / 4.0;
    q[(0, 2)] = d3 / 2.0;
    q[(2, 0)] = d3 / 2.0;
    q[(1, 3)] = d3 / 2.0;
    q[(3, 1)] = d3 / 2.0;
    q[(2, 2)] = d2;
    q[(3, 3)] = d2;
    q * q_accel
}

fn validate_covariance(cov: &Matrix4<f64>) -> Result<()> {
    let asym = (cov - cov.transpose()).abs().max();
    if asym > 1e-12 {
        return Err(Error::InvalidInput(format!(
            "covariance not symmetric (max asymmetry {asym:.3e})"
        )));
    }
    let eig = cov.symmetric_eigenvalues();
    if eig.iter().any(|&l| l < -1e-10) {
        return Err(Error::InvalidInput(format!(
            "covariance not positive semidefinite (min eigenvalue {:.3e})",
            eig.min()
        )));
    }
    Ok(())
}

fn position_marginal(cov: &Matrix4<f64>) -> Matrix2<f64> {
    Matrix2::new(cov[(0, 0)], cov[(0, 1)], cov[(1, 0)], cov[(1, 1)])
}

/// Propagate an obstacle with the linear-Gaussian constant-velocity model
/// for `n` steps of `dt`, marginalizing the covariance to position.
pub fn propagate_cv(
    obs: &ObstacleState,
    q_accel: f64,
    dt: f64,
    n: usize,
) -> Result<GaussianPrediction> {
    if dt <= 0.0 || !dt.is_finite() {
        return Err(Error::InvalidInput(format!("dt must be positive, got {dt}")));
    }
    if n < 1 {
        return Err(Error::InvalidInput("horizon must be at least 1".to_string()));
    }
    validate_covariance(&obs.covariance)?;

    let f = transition(dt);
    let q = process_noise(dt, q_accel);
    let mut means = Vec::with_capacity(n + 1);
    let mut covs = Vec::with_capacity(n + 1);
    let mut joint = obs.covariance;
    means.push(obs.position);
    covs.push(position_marginal(&joint));
    for k in 1..=n {
        means.push(obs.position + obs.velocity * (k as f64 * dt));
        joint = f * joint * f.transpose() + q;
        covs.push(position_marginal(&joint));
    }
    Ok(GaussianPrediction {
        obstacle_id: obs.id,
        radius: obs.radius,
        means,
        covariances: covs,
        terminal_covariance: joint,
        dt,
        q_accel,
    })
}

/// Extend a prediction to `n_target` steps. Means extrapolate the last
/// inter-step displacement; covariance follows the policy. Targets at or
/// below the current horizon return the prediction unchanged.
pub fn extend_prediction(
    pred: &GaussianPrediction,
    n_target: usize,
    policy: ExtendPolicy,
) -> GaussianPrediction {
    let n = pred.horizon();
    if n_target <= n {
        return pred.clone();
    }
    let mut out = pred.clone();
    let last = pred.means[n];
    let step = if n >= 1 {
        pred.means[n] - pred.means[n - 1]
    } else {
        Vec2::zeros()
    };
    let f = transition(pred.dt);
    let q = process_noise(pred.dt, pred.q_accel);
    for k in 1..=(n_target - n) {
        out.means.push(last + step * k as f64);
        match policy {
            ExtendPolicy::HoldCovariance => {
                out.covariances.push(pred.covariances[n]);
            }
            ExtendPolicy::Grow => {
                out.terminal_covariance = f * out.terminal_covariance * f.transpose() + q;
                out.covariances.push(position_marginal(&out.terminal_covariance));
            }
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use rand_distr::StandardNormal;

    fn obstacle(position: Vec2, velocity: Vec2) -> ObstacleState {
        ObstacleState::deterministic(0, position, velocity, 0.3)
    }

    #[test]
    fn noiseless_constant_velocity_means() {
        let pred = propagate_cv(&obstacle(Vec2::zeros(), Vec2::new(1.0, 0.0)), 0.0, 0.2, 10)
            .unwrap();
        assert_abs_diff_eq!(pred.means[10].x, 2.0, epsilon = 1e-12);
        assert_abs_diff_eq!(pred.means[10].y, 0.0, epsilon = 1e-12);
        assert!(pred.covariances.iter().all(|c| c.abs().max() == 0.0));
    }

    #[test]
    fn stationary_obstacle_means_constant() {
        let p0 = Vec2::new(3.0, -1.5);
        let pred = propagate_cv(&obstacle(p0, Vec2::zeros()), 0.0, 0.2, 15).unwrap();
        for m in &pred.means {
            assert_abs_diff_eq!((m - p0).norm(), 0.0, epsilon = 1e-12);
        }
    }

    /// Independent scalar recursion for the per-axis (pos, vel) covariance.
    fn scalar_variance_oracle(q: f64, dt: f64, n: usize) -> f64 {
        let (mut pp, mut pv, mut vv) = (0.0, 0.0, 0.0);
        for _ in 0..n {
            let npp = pp + 2.0 * dt * pv + dt * dt * vv + q * dt.powi(4) / 4.0;
            let npv = pv + dt * vv + q * dt.powi(3) / 2.0;
            let nvv = vv + q * dt * dt;
            pp = npp;
            pv = npv;
            vv = nvv;
        }
        pp
    }

    #[test]
    fn accumulated_variance_matches_oracle_and_monte_carlo() {
        let (q, dt, n) = (0.5, 0.2, 20);
        let pred = propagate_cv(&obstacle(Vec2::zeros(), Vec2::new(1.0, 0.5)), q, dt, n).unwrap();
        let expect = scalar_variance_oracle(q, dt, n);
        assert_abs_diff_eq!(pred.covariances[n][(0, 0)], expect, epsilon = 1e-12);
        assert_abs_diff_eq!(pred.covariances[n][(1, 1)], expect, epsilon = 1e-12);

        // Monte-Carlo: integrate per-step white acceleration directly.
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let runs = 100_000;
        let mut sum = 0.0;
        let mut sum_sq = 0.0;
        for _ in 0..runs {
            let mut x: f64 = 0.0;
            let mut v = 1.0;
            for _ in 0..n {
                let a: f64 = rng.sample::<f64, _>(StandardNormal) * q.sqrt();
                x += v * dt + 0.5 * a * dt * dt;
                v += a * dt;
            }
            let dev = x - (1.0 * dt * n as f64);
            sum += dev;
            sum_sq += dev * dev;
        }
        let mc_var = sum_sq / runs as f64 - (sum / runs as f64).powi(2);
        assert!(
            (mc_var - expect).abs() / expect < 0.03,
            "MC {mc_var} vs closed form {expect}"
        );
    }

    #[test]
    fn rejects_bad_inputs() {
        let mut obs = obstacle(Vec2::zeros(), Vec2::zeros());
        assert!(propagate_cv(&obs, 0.1, 0.0, 5).is_err());
        assert!(propagate_cv(&obs, 0.1, 0.2, 0).is_err());
        obs.covariance[(0, 1)] = 0.5; // asymmetric
        assert!(propagate_cv(&obs, 0.1, 0.2, 5).is_err());
        obs.covariance[(0, 1)] = 0.0;
        obs.covariance[(0, 0)] = -1.0; // indefinite
        assert!(propagate_cv(&obs, 0.1, 0.2, 5).is_err());
    }

    #[test]
    fn extension_identity_and_hold() {
        let pred = propagate_cv(&obstacle(Vec2::zeros(), Vec2::new(1.0, 0.0)), 0.3, 0.2, 10)
            .unwrap();
        let same = extend_prediction(&pred, 10, ExtendPolicy::Grow);
        assert_eq!(same.means.len(), pred.means.len());
        for (a, b) in same.means.iter().zip(pred.means.iter()) {
            assert_abs_diff_eq!((a - b).norm(), 0.0, epsilon = 1e-15);
        }

        let held = extend_prediction(&pred, 16, ExtendPolicy::HoldCovariance);
        assert_eq!(held.horizon(), 16);
        for k in 10..=16 {
            assert_abs_diff_eq!(
                (held.covariances[k] - pred.covariances[10]).abs().max(),
                0.0,
                epsilon = 1e-15
            );
        }
    }

    #[test]
    fn grow_extension_matches_direct_propagation() {
        let obs = obstacle(Vec2::new(1.0, 2.0), Vec2::new(0.7, -0.3));
        let short = propagate_cv(&obs, 0.5, 0.2, 20).unwrap();
        let grown = extend_prediction(&short, 35, ExtendPolicy::Grow);
        let direct = propagate_cv(&obs, 0.5, 0.2, 35).unwrap();
        for k in 0..=35 {
            assert!((grown.means[k] - direct.means[k]).norm() < 1e-9);
            assert!((grown.covariances[k] - direct.covariances[k]).abs().max() < 1e-9);
        }
    }

    #[test]
    fn propagation_linear_in_initial_mean() {
        let delta = Vec2::new(0.4, -0.9);
        let a = propagate_cv(&obstacle(Vec2::new(1.0, 1.0), Vec2::new(0.5, 0.2)), 0.3, 0.2, 12)
            .unwrap();
        let b = propagate_cv(
            &obstacle(Vec2::new(1.0, 1.0) + delta, Vec2::new(0.5, 0.2)),
            0.3,
            0.2,
            12,
        )
        .unwrap();
        for k in 0..=12 {
            assert!((b.means[k] - a.means[k] - delta).norm() < 1e-12);
            assert!((b.covariances[k] - a.covariances[k]).abs().max() < 1e-15);
        }
    }

    #[test]
    fn covariance_psd_and_trace_monotone() {
        let mut obs = obstacle(Vec2::zeros(), Vec2::new(1.0, 0.0));
        obs.covariance = Matrix4::identity() * 0.01;
        let pred = propagate_cv(&obs, 0.3, 0.2, 35).unwrap();
        let mut prev_trace = -1.0;
        for cov in &pred.covariances {
            // Cholesky success implies PSD (jitter covers the zero matrix).
            let jittered = cov + Matrix2::identity() * 1e-12;
            assert!(nalgebra::Cholesky::new(jittered).is_some());
            let tr = cov.trace();
            assert!(tr >= prev_trace - 1e-15);
            prev_trace = tr;
        }
    }
}

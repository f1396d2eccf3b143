//! T-MPC++ coordinator: run guidance, dispatch the guided local planners
//! and one non-guided fallback in parallel, and select the lowest-cost
//! feasible trajectory with a small consistency preference for the
//! previously chosen topology class.

use std::sync::Arc;
use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::guidance::{
    build_prm, cycle_seed, extract_paths, propagate_graph, GuidanceGraph, GuidanceParams,
    GuidanceTrajectory,
};
use crate::ocp::SqpOptions;
use crate::path::ReferencePath;
use crate::prediction::{extend_prediction, propagate_cv, ExtendPolicy, GaussianPrediction, ObstacleState};
use crate::topology::TopologySignature;
use crate::trajopt::{
    braking_rollout, build_problem, cold_start, solve_planner, BicycleParams, ControlInput,
    PlannerSolution, PlannerWeights, RiskAllocation, VehicleState, WarmStartKind,
};

/// Full planner configuration (exposed in the scenario file).
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct TmpcConfig {
    /// Number of guided planner instances (P). Zero reproduces the
    /// single-planner baseline.
    pub n_guided: usize,
    /// Run the non-guided fallback planner alongside the guided ones.
    pub use_fallback: bool,
    /// Multiplicative cost discount for candidates that keep the previously
    /// selected topology class.
    pub beta_consistency: f64,
    /// Replanning period [s].
    pub replan_period: f64,
    /// Horizon steps and step length.
    pub horizon_steps: usize,
    pub dt: f64,
    /// Obstacle prediction window [s]; extended to the horizon per policy.
    pub prediction_horizon: f64,
    pub extension: ExtendPolicy,
    /// White-noise acceleration intensity for pedestrian predictions.
    pub q_accel_prediction: f64,
    pub allocation: RiskAllocation,
    pub weights: PlannerWeights,
    pub bicycle: BicycleParams,
    pub guidance: GuidanceParams,
    pub sqp: SqpOptions,
    /// Additionally solve a cold-started (zero input) instance each cycle
    /// for the infeasibility instrumentation; excluded from selection.
    pub instrument_cold_start: bool,
}

impl Default for TmpcConfig {
    fn default() -> Self {
        Self {
            n_guided: 4,
            use_fallback: true,
            beta_consistency: 0.1,
            replan_period: 0.1,
            horizon_steps: 35,
            dt: 0.2,
            prediction_horizon: 4.0,
            extension: ExtendPolicy::Grow,
            q_accel_prediction: 0.3,
            allocation: RiskAllocation::PerConstraint,
            weights: PlannerWeights::default(),
            bicycle: BicycleParams::default(),
            guidance: GuidanceParams::default(),
            sqp: SqpOptions::default(),
            instrument_cold_start: false,
        }
    }
}

/// Which planner instance produced a candidate.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Provenance {
    Guided(usize),
    Fallback,
    /// Max-braking trajectory returned when every candidate is infeasible.
    Emergency,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CandidateRecord {
    pub solution: PlannerSolution,
    pub provenance: Provenance,
    /// [s]
    pub solve_time: f64,
}

/// Outcome of one planning cycle.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PlanningCycleResult {
    pub candidates: Vec<CandidateRecord>,
    pub selected_index: usize,
    /// [s]
    pub cycle_time: f64,
    /// Number of guidance trajectories found this cycle.
    pub guidance_count: usize,
    /// Instrumentation probe (never selected).
    pub cold_probe: Option<PlannerSolution>,
}

impl PlanningCycleResult {
    pub fn selected(&self) -> &PlannerSolution {
        &self.candidates[self.selected_index].solution
    }

    pub fn selected_signature(&self) -> &TopologySignature {
        &self.selected().signature
    }
}

/// Stateful coordinator; owns the propagated guidance graph and the
/// previous selection.
pub struct TmpcPlanner {
    pub config: TmpcConfig,
    path: Arc<ReferencePath>,
    episode_seed: u64,
    cycle_index: u64,
    prev_graph: Option<GuidanceGraph>,
    prev_selected: Option<PlannerSolution>,
}

impl TmpcPlanner {
    pub fn new(path: Arc<ReferencePath>, config: TmpcConfig, episode_seed: u64) -> Self {
        Self {
            config,
            path,
            episode_seed,
            cycle_index: 0,
            prev_graph: None,
            prev_selected: None,
        }
    }

    pub fn path(&self) -> &Arc<ReferencePath> {
        &self.path
    }

    /// Predict all obstacles over the planning horizon.
    pub fn predict(&self, obstacles: &[ObstacleState]) -> Vec<GaussianPrediction> {
        let cfg = &self.config;
        let pred_steps = ((cfg.prediction_horizon / cfg.dt).round() as usize)
            .clamp(1, cfg.horizon_steps);
        obstacles
            .iter()
            .map(|obs| {
                let base = propagate_cv(obs, cfg.q_accel_prediction, cfg.dt, pred_steps)
                    .expect("valid obstacle covariance");
                extend_prediction(&base, cfg.horizon_steps, cfg.extension)
            })
            .collect()
    }

    /// Run one planning cycle. Always returns a drivable trajectory; when
    /// every candidate is infeasible the result carries a flagged
    /// max-braking fallback.
    pub fn plan(&mut self, ego: &VehicleState, obstacles: &[ObstacleState]) -> PlanningCycleResult {
        let started = Instant::now();
        let cfg = self.config.clone();
        let predictions = self.predict(obstacles);

        // Guidance layer.
        let mut guidance_trajectories: Vec<GuidanceTrajectory> = Vec::new();
        if cfg.n_guided > 0 {
            let propagated = self.prev_graph.take().map(|g| {
                propagate_graph(&g, cfg.replan_period, ego, &predictions, &cfg.guidance)
            });
            let mut gparams = cfg.guidance.clone();
            gparams.p_max = cfg.n_guided;
            gparams.v_ref = cfg.weights.v_ref;
            gparams.t_horizon = cfg.dt * cfg.horizon_steps as f64;
            let graph = build_prm(
                ego,
                &self.path,
                &predictions,
                propagated,
                &gparams,
                cfg.dt,
                cfg.horizon_steps,
                cycle_seed(self.episode_seed, self.cycle_index),
            );
            guidance_trajectories =
                extract_paths(&graph, &predictions, &gparams, cfg.dt, cfg.horizon_steps);
            self.prev_graph = Some(graph);
        }
        let guidance_count = guidance_trajectories.len();

        // Assemble solver jobs: one per guidance class plus the fallback.
        enum Job {
            Guided(usize, GuidanceTrajectory),
            Fallback,
            Probe,
        }
        let mut jobs: Vec<Job> = guidance_trajectories
            .into_iter()
            .enumerate()
            .map(|(i, g)| Job::Guided(i, g))
            .collect();
        if cfg.use_fallback {
            jobs.push(Job::Fallback);
        }
        if cfg.instrument_cold_start {
            jobs.push(Job::Probe);
        }

        let prev_selected = self.prev_selected.clone();
        let path = self.path.clone();
        let solved: Vec<(Option<Provenance>, PlannerSolution, f64)> = jobs
            .into_par_iter()
            .map(|job| {
                let t0 = Instant::now();
                let (provenance, warm_states, warm_inputs, kind) = match &job {
                    Job::Guided(i, guidance) => {
                        let (ws, wu) = warm_start_from_guidance(
                            guidance,
                            ego,
                            cfg.dt,
                            cfg.horizon_steps,
                            &cfg.bicycle,
                            &path,
                        );
                        (Some(Provenance::Guided(*i)), ws, wu, WarmStartKind::Guidance)
                    }
                    Job::Fallback => match &prev_selected {
                        Some(prev) => {
                            let (ws, wu) = shift_warm_start(
                                prev,
                                cfg.replan_period,
                                ego,
                                cfg.dt,
                                cfg.horizon_steps,
                                &cfg.bicycle,
                            );
                            (
                                Some(Provenance::Fallback),
                                ws,
                                wu,
                                WarmStartKind::ShiftedPrevious,
                            )
                        }
                        None => {
                            let (ws, wu) =
                                braking_rollout(ego, cfg.dt, cfg.horizon_steps, &cfg.bicycle);
                            (
                                Some(Provenance::Fallback),
                                ws,
                                wu,
                                WarmStartKind::BrakingRollout,
                            )
                        }
                    },
                    Job::Probe => {
                        let (ws, wu) = cold_start(ego, cfg.dt, cfg.horizon_steps, &cfg.bicycle);
                        (None, ws, wu, WarmStartKind::Cold)
                    }
                };
                let mut problem = build_problem(
                    *ego,
                    path.clone(),
                    predictions.clone(),
                    cfg.weights,
                    cfg.bicycle.clone(),
                    cfg.dt,
                    cfg.horizon_steps,
                    cfg.allocation,
                );
                let solution = solve_planner(
                    &mut problem,
                    &warm_states,
                    &warm_inputs,
                    kind,
                    cfg.guidance.theta_pass,
                    &cfg.sqp,
                );
                (provenance, solution, t0.elapsed().as_secs_f64())
            })
            .collect();

        let mut candidates: Vec<CandidateRecord> = Vec::new();
        let mut cold_probe = None;
        for (provenance, solution, solve_time) in solved {
            match provenance {
                Some(p) => candidates.push(CandidateRecord {
                    solution,
                    provenance: p,
                    solve_time,
                }),
                None => cold_probe = Some(solution),
            }
        }

        // Selection: cost ordering over feasible candidates with a
        // multiplicative consistency preference.
        let prev_signature = prev_selected.as_ref().map(|p| p.signature.clone());
        let mut best: Option<(usize, f64)> = None;
        for (i, cand) in candidates.iter().enumerate() {
            if !cand.solution.feasible {
                continue;
            }
            let consistent = prev_signature
                .as_ref()
                .map(|sig| sig.labels == cand.solution.signature.labels)
                .unwrap_or(false);
            let score = cand.solution.cost
                * (1.0 - if consistent { cfg.beta_consistency } else { 0.0 });
            if best.map_or(true, |(_, b)| score < b - 1e-15) {
                best = Some((i, score));
            }
        }

        // With every candidate infeasible, a lightly violating soft-retry
        // solution still steers away from obstacles; executing it (flagged)
        // beats parking in a pedestrian's track. Heavier violations fall
        // through to emergency braking.
        if best.is_none() {
            let mut least: Option<(usize, f64)> = None;
            for (i, cand) in candidates.iter().enumerate() {
                let v = cand.solution.max_violation;
                if v < 0.5 && least.map_or(true, |(_, b)| v < b - 1e-12) {
                    least = Some((i, v));
                }
            }
            best = least;
        }

        let selected_index = match best {
            Some((i, _)) => i,
            None => {
                // Emergency: max braking from the current state.
                let (states, inputs) =
                    braking_rollout(ego, cfg.dt, cfg.horizon_steps, &cfg.bicycle);
                let positions: Vec<crate::Vec2> =
                    states.iter().map(|s| s.position()).collect();
                let signature = crate::topology::passing_signature(
                    &positions,
                    &predictions,
                    cfg.guidance.theta_pass,
                )
                .unwrap_or_default();
                candidates.push(CandidateRecord {
                    solution: PlannerSolution {
                        states,
                        inputs,
                        cost: f64::INFINITY,
                        feasible: false,
                        kkt_residual: f64::INFINITY,
                        iterations: 0,
                        soft_retry: false,
                        max_violation: f64::INFINITY,
                        signature,
                        warm_start: WarmStartKind::BrakingRollout,
                    },
                    provenance: Provenance::Emergency,
                    solve_time: 0.0,
                });
                candidates.len() - 1
            }
        };

        self.prev_selected = Some(candidates[selected_index].solution.clone());
        self.cycle_index += 1;

        PlanningCycleResult {
            candidates,
            selected_index,
            cycle_time: started.elapsed().as_secs_f64(),
            guidance_count,
            cold_probe,
        }
    }
}

/// Receding-horizon shift: resample the previous plan's zero-order-hold
/// input sequence `shift` seconds later, repeat the final input for the
/// tail, and re-integrate from the measured ego state.
pub fn shift_warm_start(
    prev: &PlannerSolution,
    shift: f64,
    ego: &VehicleState,
    dt: f64,
    n: usize,
    params: &BicycleParams,
) -> (Vec<VehicleState>, Vec<ControlInput>) {
    let n_prev = prev.inputs.len();
    let inputs: Vec<ControlInput> = (0..n)
        .map(|k| {
            let t = shift + k as f64 * dt;
            let idx = ((t / dt).floor() as usize).min(n_prev.saturating_sub(1));
            prev.inputs[idx]
        })
        .collect();
    (crate::trajopt::rollout(ego, &inputs, dt, params.wheelbase), inputs)
}

/// Warm start from a guidance trajectory: positions from the spline,
/// headings from its tangent, speeds from its time derivative, steering
/// from the implied heading rate, and inputs by inverse dynamics.
pub fn warm_start_from_guidance(
    guidance: &GuidanceTrajectory,
    ego: &VehicleState,
    dt: f64,
    n: usize,
    params: &BicycleParams,
    path: &ReferencePath,
) -> (Vec<VehicleState>, Vec<ControlInput>) {
    let mut headings = Vec::with_capacity(n + 1);
    let mut speeds = Vec::with_capacity(n + 1);
    let mut positions = Vec::with_capacity(n + 1);
    for k in 0..=n {
        let t = k as f64 * dt;
        let vel = guidance.velocity_at(t);
        let speed = vel.norm().clamp(params.v_min, params.v_max);
        let heading = if vel.norm() > 0.05 {
            vel.y.atan2(vel.x)
        } else if k > 0 {
            headings[k - 1]
        } else {
            ego.heading
        };
        positions.push(guidance.position_at(t));
        headings.push(heading);
        speeds.push(speed);
    }

    let wrap = |a: f64| {
        let r = a.rem_euclid(std::f64::consts::TAU);
        if r > std::f64::consts::PI {
            r - std::f64::consts::TAU
        } else {
            r
        }
    };
    let mut steerings = Vec::with_capacity(n + 1);
    for k in 0..=n {
        let rate = if k < n {
            wrap(headings[k + 1] - headings[k]) / dt
        } else if k > 0 {
            wrap(headings[k] - headings[k - 1]) / dt
        } else {
            0.0
        };
        let delta = (params.wheelbase * rate / speeds[k].max(0.3))
            .atan()
            .clamp(-params.delta_max, params.delta_max);
        steerings.push(delta);
    }

    let mut progresses = Vec::with_capacity(n + 1);
    let mut s_prev = ego.progress;
    for pos in &positions {
        s_prev = path.project(*pos, s_prev).s;
        progresses.push(s_prev);
    }

    let mut states = Vec::with_capacity(n + 1);
    states.push(*ego);
    for k in 1..=n {
        states.push(VehicleState {
            x: positions[k].x,
            y: positions[k].y,
            heading: headings[k],
            speed: speeds[k],
            steering: steerings[k],
            progress: progresses[k],
        });
    }
    let inputs: Vec<ControlInput> = (0..n)
        .map(|k| ControlInput {
            accel: ((speeds[k + 1] - speeds[k]) / dt).clamp(-params.a_max, params.a_max),
            steer_rate: ((steerings[k + 1] - steerings[k]) / dt)
                .clamp(-params.omega_max, params.omega_max),
        })
        .collect();
    (states, inputs)
}

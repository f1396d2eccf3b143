//! Acceptance suite: every criterion below runs at its stated tolerance and
//! prints one PASS/FAIL line. Run with
//! `cargo test -p tmpc-bench --test acceptance -- --nocapture`.
//!
//! The criteria run inside a single test so heavy batches and wall-clock
//! measurements never contend with each other.

use std::sync::Arc;

use tmpc_bench::batch::{run_batch, BatchSpec};
use tmpc_bench::csv_io::SummaryRow;
use tmpc_core::guidance::{build_prm, extract_paths, GuidanceParams};
use tmpc_core::ocp::{self, SqpOptions};
use tmpc_core::path::{ReferencePath, Waypoint};
use tmpc_core::prediction::{propagate_cv, ObstacleState};
use tmpc_core::sim::{run_episode, spawn_pedestrians, PlannerKind, PlantKind, ScenarioConfig};
use tmpc_core::tmpc::TmpcPlanner;
use tmpc_core::topology::winding_number;
use tmpc_core::tracking::{
    fiala_lateral_force, friction_circle_margin, single_track_step, FialaTireParams,
    MpccController, SingleTrackParams, SingleTrackState, TrackerReference, TrackerWeights,
};
use tmpc_core::trajopt::{
    build_problem, cold_start, rollout, solve_planner, BicycleParams, PlannerWeights,
    RiskAllocation, VehicleState, WarmStartKind,
};
use tmpc_core::Vec2;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

type CriterionResult = Result<String, String>;

fn straight_path(len: f64) -> Arc<ReferencePath> {
    let n = (len / 4.0).ceil() as usize;
    let pts: Vec<Waypoint> = (0..=n)
        .map(|i| Waypoint::new(len * i as f64 / n as f64, 0.0))
        .collect();
    Arc::new(ReferencePath::fit(&pts).unwrap())
}

fn on_path_state(s: f64, v: f64) -> VehicleState {
    VehicleState {
        x: s,
        y: 0.0,
        heading: 0.0,
        speed: v,
        steering: 0.0,
        progress: s,
    }
}

fn cell<'a>(summary: &'a [SummaryRow], peds: usize, planner: &str) -> &'a SummaryRow {
    summary
        .iter()
        .find(|s| s.n_peds == peds && s.planner == planner)
        .unwrap_or_else(|| panic!("missing summary cell {peds}/{planner}"))
}

/// Criterion 1: qualitative reproduction of the comparison table on the
/// calibrated 36 m scenario with 25 paired seeds per cell.
fn criterion_table(out_dir: &std::path::Path) -> CriterionResult {
    let spec = BatchSpec {
        scenario: Default::default(),
        planners: vec![
            PlannerKind::Braking,
            PlannerKind::Lmpcc,
            PlannerKind::TmpcppNoFallback,
            PlannerKind::Tmpcpp,
        ],
        ped_counts: vec![0, 2, 4],
        runs: 25,
        base_seed: 1000,
        out_dir: out_dir.join("table"),
        write_logs: false,
        timing: false,
    };
    let scenario = ScenarioConfig::default();
    let outcome = run_batch(&spec, &scenario).map_err(|e| format!("batch failed: {e}"))?;
    if outcome.failures > 0 {
        return Err(format!("{} episodes failed", outcome.failures));
    }
    let s = &outcome.summary;

    let mut notes = Vec::new();
    let mut errors = Vec::new();

    // 0 pedestrians: duration within 10% of 19.4 s, clean record.
    let zero = cell(s, 0, "tmpcpp");
    notes.push(format!("0-ped tmpcpp {:.1}s", zero.mean_duration_s));
    if (zero.mean_duration_s - 19.4).abs() / 19.4 > 0.10 {
        errors.push(format!(
            "0-ped duration {:.2}s outside 19.4s +-10%",
            zero.mean_duration_s
        ));
    }
    if zero.collisions_total != 0 || zero.timeouts_total != 0 {
        errors.push("0-ped tmpcpp not collision/timeout free".into());
    }

    // 4 pedestrians: safety and ordering.
    for planner in ["tmpcpp", "tmpcpp_no_fallback"] {
        let row = cell(s, 4, planner);
        if row.collisions_total != 0 || row.timeouts_total != 0 {
            errors.push(format!(
                "4-ped {planner}: {} collisions, {} timeouts",
                row.collisions_total, row.timeouts_total
            ));
        }
    }
    let t4 = cell(s, 4, "tmpcpp");
    let l4 = cell(s, 4, "lmpcc");
    let b4 = cell(s, 4, "braking");
    notes.push(format!(
        "4-ped dur tmpcpp {:.1} < lmpcc {:.1}; vel {:.2} >= {:.2} >= {:.2}",
        t4.mean_duration_s,
        l4.mean_duration_s,
        t4.mean_avg_vel_mps,
        l4.mean_avg_vel_mps,
        b4.mean_avg_vel_mps
    ));
    if t4.mean_duration_s >= l4.mean_duration_s {
        errors.push("4-ped duration: tmpcpp not faster than lmpcc".into());
    }
    if !(t4.mean_avg_vel_mps >= l4.mean_avg_vel_mps
        && l4.mean_avg_vel_mps >= b4.mean_avg_vel_mps)
    {
        errors.push("4-ped average velocity ordering violated".into());
    }

    // Degradation shape.
    for planner in ["braking", "lmpcc", "tmpcpp_no_fallback", "tmpcpp"] {
        let d0 = cell(s, 0, planner).mean_duration_s;
        let d2 = cell(s, 2, planner).mean_duration_s;
        let d4 = cell(s, 4, planner).mean_duration_s;
        if !(d0 <= d2 && d2 <= d4) {
            errors.push(format!(
                "{planner} durations not monotone: {d0:.2} -> {d2:.2} -> {d4:.2}"
            ));
        }
    }
    let t_inc = t4.mean_duration_s - cell(s, 0, "tmpcpp").mean_duration_s;
    let l_inc = l4.mean_duration_s - cell(s, 0, "lmpcc").mean_duration_s;
    notes.push(format!("0->4 increase tmpcpp {t_inc:.1}s vs lmpcc {l_inc:.1}s"));
    if t_inc >= l_inc {
        errors.push(format!(
            "tmpcpp 0->4 increase {t_inc:.2}s not smaller than lmpcc {l_inc:.2}s"
        ));
    }

    if errors.is_empty() {
        Ok(notes.join("; "))
    } else {
        Err(errors.join("; "))
    }
}

/// Criterion 2: Monte-Carlo validity of the linearized chance constraints.
fn criterion_chance_validity() -> CriterionResult {
    let path = straight_path(40.0);
    let x0 = on_path_state(0.0, 2.0);
    let q_accel = 0.3;
    let dt = 0.2;
    let n = 35;

    let mut params = BicycleParams::default();
    params.safety_margin = 0.0; // active constraint sits exactly at the quantile margin
    let obstacle = ObstacleState::deterministic(0, Vec2::new(12.0, -0.6), Vec2::zeros(), 0.3);
    let r_total = 0.3 + params.disc_radius;

    // Per-step case: the risk at each constraint is the full budget.
    let eps = 0.05;
    let mut weights = PlannerWeights::default();
    weights.risk = eps;
    let pred = propagate_cv(&obstacle, q_accel, dt, n).unwrap();
    let mut problem = build_problem(
        x0,
        path.clone(),
        vec![pred.clone()],
        weights,
        params.clone(),
        dt,
        n,
        RiskAllocation::PerConstraint,
    );
    let (ws, wu) = cold_start(&x0, dt, n, &params);
    let sol = solve_planner(
        &mut problem,
        &ws,
        &wu,
        WarmStartKind::Cold,
        0.25,
        &SqpOptions::default(),
    );
    if !sol.feasible {
        return Err("per-step problem unexpectedly infeasible".into());
    }
    // Most-active step: smallest slack of (distance - margin).
    let gamma = tmpc_core::stats::standard_normal_quantile(1.0 - eps);
    let mut active_k = 0;
    let mut best_slack = f64::INFINITY;
    for k in 1..=n {
        let st = &sol.states[k];
        for off in &params.disc_offsets {
            let c = Vec2::new(st.x + off * st.heading.cos(), st.y + off * st.heading.sin());
            let sigma = pred.covariances[k];
            let diff = c - pred.means[k];
            let a = diff / diff.norm();
            let dir_std = (a.transpose() * sigma * a)[(0, 0)].max(0.0).sqrt();
            let slack = diff.norm() - (r_total + gamma * dir_std);
            if slack < best_slack {
                best_slack = slack;
                active_k = k;
            }
        }
    }
    if best_slack.abs() > 5e-3 {
        return Err(format!(
            "no active constraint found (best slack {best_slack:.4})"
        ));
    }
    // Sample the obstacle at the active step and count disc overlaps.
    let sigma = pred.covariances[active_k];
    let mu = pred.means[active_k];
    let chol = nalgebra::Cholesky::new(sigma + nalgebra::Matrix2::identity() * 1e-15)
        .ok_or("covariance not PSD")?;
    let l = chol.l();
    let st = &sol.states[active_k];
    let discs: Vec<Vec2> = params
        .disc_offsets
        .iter()
        .map(|off| Vec2::new(st.x + off * st.heading.cos(), st.y + off * st.heading.sin()))
        .collect();
    let mut rng = ChaCha8Rng::seed_from_u64(99);
    let samples = 100_000;
    let mut hits = 0;
    for _ in 0..samples {
        let z = Vec2::new(rng.sample(StandardNormal), rng.sample(StandardNormal));
        let o = mu + l * z;
        if discs.iter().any(|c| (c - o).norm() <= r_total) {
            hits += 1;
        }
    }
    let per_step_rate = hits as f64 / samples as f64;
    if per_step_rate > eps + 0.01 {
        return Err(format!(
            "per-step violation {per_step_rate:.4} exceeds eps {eps} + 0.01"
        ));
    }

    // Joint case: uniform allocation over the horizon.
    let eps_joint = 0.1;
    let mut weights = PlannerWeights::default();
    weights.risk = eps_joint;
    let mut problem = build_problem(
        x0,
        path,
        vec![pred],
        weights,
        params.clone(),
        dt,
        n,
        RiskAllocation::Uniform,
    );
    let sol = solve_planner(
        &mut problem,
        &ws,
        &wu,
        WarmStartKind::Cold,
        0.25,
        &SqpOptions::default(),
    );
    if !sol.feasible {
        return Err("joint problem unexpectedly infeasible".into());
    }
    let disc_tracks: Vec<Vec<Vec2>> = (1..=n)
        .map(|k| {
            let st = &sol.states[k];
            params
                .disc_offsets
                .iter()
                .map(|off| {
                    Vec2::new(st.x + off * st.heading.cos(), st.y + off * st.heading.sin())
                })
                .collect()
        })
        .collect();
    let mut joint_hits = 0;
    let mut rng = ChaCha8Rng::seed_from_u64(123);
    for _ in 0..samples {
        // Sample one white-acceleration obstacle trajectory.
        let mut p = obstacle.position;
        let mut v = obstacle.velocity;
        let std = q_accel.sqrt();
        let mut collided = false;
        for discs in disc_tracks.iter() {
            let a = Vec2::new(
                rng.sample::<f64, _>(StandardNormal) * std,
                rng.sample::<f64, _>(StandardNormal) * std,
            );
            p += v * dt + a * (0.5 * dt * dt);
            v += a * dt;
            if discs.iter().any(|c| (c - p).norm() <= r_total) {
                collided = true;
                break;
            }
        }
        if collided {
            joint_hits += 1;
        }
    }
    let joint_rate = joint_hits as f64 / samples as f64;
    if joint_rate > eps_joint + 0.01 {
        return Err(format!(
            "joint violation {joint_rate:.4} exceeds eps_joint {eps_joint} + 0.01"
        ));
    }
    Ok(format!(
        "per-step {per_step_rate:.4} <= {:.2}; joint {joint_rate:.4} <= {:.2}",
        eps + 0.01,
        eps_joint + 0.01
    ))
}

/// Criterion 3: winding-number invariances and guidance class diversity.
fn criterion_topology() -> CriterionResult {
    // Invariances over 1000 randomized pairs.
    let mut rng = ChaCha8Rng::seed_from_u64(31);
    fn random_traj(rng: &mut ChaCha8Rng, offset: f64) -> Vec<Vec2> {
        let mut p = Vec2::new(
            rng.gen_range(-5.0..5.0) + offset,
            rng.gen_range(-5.0..5.0),
        );
        let mut out = vec![p];
        for _ in 0..20 {
            p += Vec2::new(rng.gen_range(-0.5..0.5), rng.gen_range(-0.5..0.5));
            out.push(p);
        }
        out
    }
    let mut checked = 0;
    while checked < 1000 {
        let ego = random_traj(&mut rng, 0.0);
        let obs = random_traj(&mut rng, 12.0);
        let Ok(w) = winding_number(&ego, &obs) else {
            continue;
        };
        let rev = |t: &[Vec2]| t.iter().rev().copied().collect::<Vec<_>>();
        let mirror = |t: &[Vec2]| t.iter().map(|p| Vec2::new(p.x, -p.y)).collect::<Vec<_>>();
        let w_rev = winding_number(&rev(&ego), &rev(&obs)).unwrap();
        let w_mir = winding_number(&mirror(&ego), &mirror(&obs)).unwrap();
        if (w + w_rev).abs() > 1e-9 || (w + w_mir).abs() > 1e-9 {
            return Err("reversal/mirror antisymmetry violated".into());
        }
        let angle: f64 = rng.gen_range(0.0..std::f64::consts::TAU);
        let shift = Vec2::new(rng.gen_range(-10.0..10.0), rng.gen_range(-10.0..10.0));
        let rot = |p: &Vec2| {
            Vec2::new(
                p.x * angle.cos() - p.y * angle.sin(),
                p.x * angle.sin() + p.y * angle.cos(),
            ) + shift
        };
        let ego_r: Vec<Vec2> = ego.iter().map(rot).collect();
        let obs_r: Vec<Vec2> = obs.iter().map(rot).collect();
        if (winding_number(&ego_r, &obs_r).unwrap() - w).abs() > 1e-9 {
            return Err("rigid-motion invariance violated".into());
        }
        let refine = |t: &[Vec2]| {
            let mut out = Vec::with_capacity(t.len() * 2 - 1);
            for k in 0..t.len() - 1 {
                out.push(t[k]);
                out.push((t[k] + t[k + 1]) * 0.5);
            }
            out.push(t[t.len() - 1]);
            out
        };
        if (winding_number(&refine(&ego), &refine(&obs)).unwrap() - w).abs() > 1e-9 {
            return Err("refinement invariance violated".into());
        }
        checked += 1;
    }

    // Guidance: pairwise-distinct signatures whenever >= 2 returned, and
    // two distinct classes in >= 90/100 seeds of a 2-obstacle crossing.
    let path = straight_path(60.0);
    let params = GuidanceParams::default();
    let ego = on_path_state(0.0, 2.0);
    let mut multi_class = 0;
    let mut cycles_with_two = 0;
    for seed in 0..100 {
        let preds: Vec<_> = [(9.0, 1.0), (16.0, -1.0)]
            .iter()
            .enumerate()
            .map(|(i, (x, side))| {
                propagate_cv(
                    &ObstacleState::deterministic(
                        i as u32,
                        Vec2::new(*x, side * 6.0),
                        Vec2::new(0.0, -side * 1.1),
                        0.3,
                    ),
                    0.0,
                    0.2,
                    35,
                )
                .unwrap()
            })
            .collect();
        let graph = build_prm(&ego, &path, &preds, None, &params, 0.2, 35, seed);
        let trajs = extract_paths(&graph, &preds, &params, 0.2, 35);
        if trajs.len() >= 2 {
            cycles_with_two += 1;
            for i in 0..trajs.len() {
                for j in i + 1..trajs.len() {
                    if trajs[i].signature == trajs[j].signature {
                        return Err(format!("duplicate signatures in seed {seed}"));
                    }
                }
            }
        }
        let mut labels: Vec<String> =
            trajs.iter().map(|t| t.signature.describe()).collect();
        labels.sort();
        labels.dedup();
        if labels.len() >= 2 {
            multi_class += 1;
        }
    }
    if multi_class < 90 {
        return Err(format!(
            "2-obstacle crossing gave >=2 classes in only {multi_class}/100 seeds"
        ));
    }
    Ok(format!(
        "invariances <=1e-9 over 1000 pairs; distinct signatures in {cycles_with_two} multi-class cycles; {multi_class}/100 seeds with >=2 classes"
    ))
}

/// Criterion 4: optimizer correctness (Jacobians, re-simulation, fast
/// convergence at the optimum).
fn criterion_optimizer() -> CriterionResult {
    let path = straight_path(40.0);
    let mut rng = ChaCha8Rng::seed_from_u64(17);
    let pred = propagate_cv(
        &ObstacleState::deterministic(0, Vec2::new(18.0, 1.0), Vec2::new(-0.5, -0.2), 0.3),
        0.3,
        0.2,
        35,
    )
    .unwrap();
    let mut worst: f64 = 0.0;
    for _ in 0..100 {
        let x0 = VehicleState {
            x: rng.gen_range(0.0..5.0),
            y: rng.gen_range(-2.0..2.0),
            heading: rng.gen_range(-0.5..0.5),
            speed: rng.gen_range(0.3..4.0),
            steering: rng.gen_range(-0.4..0.4),
            progress: rng.gen_range(0.0..5.0),
        };
        let mut problem = build_problem(
            x0,
            path.clone(),
            vec![pred.clone()],
            PlannerWeights::default(),
            BicycleParams::default(),
            0.2,
            35,
            RiskAllocation::PerConstraint,
        );
        let states: Vec<nalgebra::DVector<f64>> = (0..=35)
            .map(|k| {
                nalgebra::DVector::from_row_slice(&[
                    x0.x + 0.35 * k as f64 + rng.gen_range(-0.05..0.05),
                    rng.gen_range(-2.0..2.0),
                    rng.gen_range(-0.5..0.5),
                    rng.gen_range(0.3..4.0),
                    rng.gen_range(-0.4..0.4),
                    (x0.progress + 0.35 * k as f64).min(39.0),
                ])
            })
            .collect();
        let inputs: Vec<nalgebra::DVector<f64>> = (0..35)
            .map(|_| {
                nalgebra::DVector::from_row_slice(&[
                    rng.gen_range(-2.0..2.0),
                    rng.gen_range(-0.5..0.5),
                ])
            })
            .collect();
        worst = worst.max(ocp::max_jacobian_error(&mut problem, &states, &inputs));
    }
    if worst > 1e-4 {
        return Err(format!("worst Jacobian error {worst:.2e} > 1e-4"));
    }

    // Feasible solutions re-simulate through the bicycle model within 1e-6.
    let params = BicycleParams::default();
    let x0 = on_path_state(0.0, 1.5);
    let mut problem = build_problem(
        x0,
        path.clone(),
        vec![pred.clone()],
        PlannerWeights::default(),
        params.clone(),
        0.2,
        35,
        RiskAllocation::PerConstraint,
    );
    let (ws, wu) = cold_start(&x0, 0.2, 35, &params);
    let sol = solve_planner(
        &mut problem,
        &ws,
        &wu,
        WarmStartKind::Cold,
        0.25,
        &SqpOptions::default(),
    );
    let re = rollout(&sol.states[0], &sol.inputs, 0.2, params.wheelbase);
    let mut max_gap: f64 = 0.0;
    for (a, b) in re.iter().zip(sol.states.iter()) {
        max_gap = max_gap.max((a.position() - b.position()).norm());
    }
    if max_gap > 1e-6 {
        return Err(format!("re-simulation gap {max_gap:.2e} > 1e-6"));
    }

    // Empty world from the reference rollout: <= 2 iterations, cost < 1e-6.
    let weights = PlannerWeights::default();
    let x0 = on_path_state(0.0, weights.v_ref);
    let mut problem = build_problem(
        x0,
        path,
        Vec::new(),
        weights,
        params.clone(),
        0.2,
        35,
        RiskAllocation::PerConstraint,
    );
    let (ws, wu) = cold_start(&x0, 0.2, 35, &params);
    let sol = solve_planner(
        &mut problem,
        &ws,
        &wu,
        WarmStartKind::Cold,
        0.25,
        &SqpOptions::default(),
    );
    if sol.iterations > 2 || sol.cost >= 1e-6 {
        return Err(format!(
            "empty-world solve: {} iterations, cost {:.2e}",
            sol.iterations, sol.cost
        ));
    }
    Ok(format!(
        "Jacobian error {worst:.2e}; re-sim gap {max_gap:.2e}; optimum in {} iterations",
        sol.iterations
    ))
}

/// Criterion 5: single-threaded-loop real-time property of the full cycle.
fn criterion_real_time() -> CriterionResult {
    let scenario = ScenarioConfig::default();
    let path = straight_path(80.0);
    let mut planner = TmpcPlanner::new(path.clone(), scenario.effective_tmpc(), 21);
    let mut ego = on_path_state(0.0, 2.0);
    let mut obstacles: Vec<ObstacleState> = (0..4)
        .map(|i| {
            let side = if i % 2 == 0 { 1.0 } else { -1.0 };
            ObstacleState::deterministic(
                i,
                Vec2::new(10.0 + 6.0 * i as f64, side * 6.0),
                Vec2::new(0.0, -side * 1.1),
                0.3,
            )
        })
        .collect();
    let mut times = Vec::new();
    for _ in 0..50 {
        let result = planner.plan(&ego, &obstacles);
        times.push(result.cycle_time);
        let sel = result.selected();
        ego = sel.states[1.min(sel.states.len() - 1)];
        ego.progress = path.project(ego.position(), ego.progress).s;
        for obs in obstacles.iter_mut() {
            let v = obs.velocity;
            obs.position += v * 0.1;
        }
    }
    times.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let median = times[times.len() / 2];
    let p95 = times[(times.len() as f64 * 0.95) as usize];
    if median > 0.1 {
        return Err(format!(
            "median cycle {:.1} ms > 100 ms (p95 {:.1} ms)",
            median * 1e3,
            p95 * 1e3
        ));
    }
    Ok(format!(
        "median cycle {:.1} ms, p95 {:.1} ms over 50 cycles",
        median * 1e3,
        p95 * 1e3
    ))
}

/// Criterion 6: tracking controller properties and the closed-loop
/// single-track episode.
fn criterion_tracking(out_dir: &std::path::Path) -> CriterionResult {
    // Fiala exactness.
    let tire = FialaTireParams {
        cornering_stiffness: 60_000.0,
        friction: 0.9,
        vertical_load: 8175.0,
    };
    let m = tire.friction * tire.vertical_load;
    let alpha_sl = (3.0 * m / tire.cornering_stiffness).atan();
    if fiala_lateral_force(0.0, &tire) != 0.0 {
        return Err("Fiala force at zero slip not exactly zero".into());
    }
    if (fiala_lateral_force(alpha_sl + 0.2, &tire) + m).abs() > 1e-12 {
        return Err("saturated Fiala force not exactly -mu Fz".into());
    }
    let below = fiala_lateral_force(alpha_sl - 1e-12, &tire);
    let above = fiala_lateral_force(alpha_sl + 1e-12, &tire);
    if (below - above).abs() > 1e-9 {
        return Err("Fiala force discontinuous at slide slip".into());
    }
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    for _ in 0..500 {
        let a = rng.gen_range(-0.6..0.6);
        if (fiala_lateral_force(a, &tire) + fiala_lateral_force(-a, &tire)).abs() > 1e-9 {
            return Err("Fiala force not odd".into());
        }
    }

    // Closed-loop MPCC on a 4-pedestrian planner episode.
    let mut cfg = ScenarioConfig::default();
    cfg.planner = PlannerKind::Tmpcpp;
    cfg.plant = PlantKind::SingleTrack;
    cfg.n_pedestrians = 4;
    cfg.seed = 1003;
    cfg.record_log = true;
    let result = run_episode(&cfg);
    let metrics = &result.metrics;
    if metrics.collisions > 0 {
        return Err(format!("{} collisions in tracked episode", metrics.collisions));
    }
    let log = result.log.ok_or("missing episode log")?;
    std::fs::create_dir_all(out_dir).ok();
    std::fs::write(out_dir.join("tracked_episode.jsonl"), log.to_jsonl()).ok();

    // Friction circle: hard assertion at every step.
    for step in &log.steps {
        if let Some((front, rear)) = step.friction_margins {
            if front <= 0.0 || rear <= 0.0 {
                return Err(format!(
                    "friction circle violated at t={:.2} (front {front:.1}, rear {rear:.1})",
                    step.t
                ));
            }
        }
    }

    // RMS contouring error against the latest planner trajectory.
    let mut sum_sq = 0.0;
    let mut count = 0usize;
    let mut cycle_idx = 0usize;
    let mut reference: Option<TrackerReference> = None;
    let mut s_guess = 0.0;
    for step in &log.steps {
        while cycle_idx < log.cycles.len() && log.cycles[cycle_idx].t <= step.t {
            let plan_states: Vec<VehicleState> = log.cycles[cycle_idx]
                .trajectory
                .iter()
                .map(|(x, y, v)| VehicleState {
                    x: *x,
                    y: *y,
                    heading: 0.0,
                    speed: *v,
                    steering: 0.0,
                    progress: 0.0,
                })
                .collect();
            reference = TrackerReference::from_plan(&plan_states);
            cycle_idx += 1;
        }
        let Some(reference) = reference.as_ref() else {
            continue;
        };
        if step.ego.3 > 2.0 + 1e-9 {
            continue; // spec bound applies at speeds up to 2 m/s
        }
        let pos = Vec2::new(step.ego.0, step.ego.1);
        let proj = reference.path.project(pos, s_guess);
        s_guess = proj.s;
        let (e_c, _) = reference.path.contouring_errors(pos, proj.s).unwrap();
        sum_sq += e_c * e_c;
        count += 1;
    }
    let rms = (sum_sq / count.max(1) as f64).sqrt();
    if rms > 0.15 {
        return Err(format!("RMS contouring error {rms:.3} m > 0.15 m"));
    }

    // Lateral offset recovery within 4 s.
    let params = SingleTrackParams::default();
    let plan: Vec<VehicleState> = (0..=60)
        .map(|k| on_path_state(k as f64 * 0.4, 2.0))
        .collect();
    let reference = TrackerReference::from_plan(&plan).unwrap();
    let mut controller = MpccController::new(TrackerWeights::default(), params.clone());
    let mut state = SingleTrackState::at_rest(0.0, 0.5, 0.0);
    state.vx = 2.0;
    let dt = 0.05;
    let mut recovered_at = None;
    for step in 0..(6.0 / dt) as usize {
        let outcome = controller.solve(&state, Some(&reference));
        state = single_track_step(&state, &outcome.command, &params, dt);
        let margins = friction_circle_margin(&state, &params);
        if margins[0] <= 0.0 || margins[1] <= 0.0 {
            return Err("friction circle violated during offset recovery".into());
        }
        if state.y.abs() < 0.05 && recovered_at.is_none() {
            recovered_at = Some(step as f64 * dt);
        }
    }
    let recovered = recovered_at.ok_or("0.5 m offset never recovered")?;
    if recovered > 4.0 {
        return Err(format!("offset recovered only after {recovered:.2} s"));
    }
    Ok(format!(
        "Fiala exact; RMS e_c {rms:.3} m over {count} steps; friction margins positive; offset recovered in {recovered:.2} s"
    ))
}

/// Criterion 7: byte-identical batch reruns and paired pedestrian spawns.
fn criterion_determinism(out_dir: &std::path::Path) -> CriterionResult {
    let scenario = ScenarioConfig::default();
    let mut spec = BatchSpec {
        scenario: Default::default(),
        planners: vec![PlannerKind::Tmpcpp, PlannerKind::Lmpcc],
        ped_counts: vec![2],
        runs: 2,
        base_seed: 41,
        out_dir: out_dir.join("det_a"),
        write_logs: false,
        timing: false,
    };
    let a = run_batch(&spec, &scenario).map_err(|e| e.to_string())?;
    spec.out_dir = out_dir.join("det_b");
    let b = run_batch(&spec, &scenario).map_err(|e| e.to_string())?;
    let text_a = std::fs::read_to_string(&a.episodes_csv).map_err(|e| e.to_string())?;
    let text_b = std::fs::read_to_string(&b.episodes_csv).map_err(|e| e.to_string())?;
    if text_a != text_b {
        return Err("episode CSVs differ between reruns".into());
    }

    // Paired seeds: identical pedestrian realizations across planners.
    let path = ReferencePath::fit(&scenario.padded_waypoints()).unwrap();
    for seed in [41u64, 42] {
        let mut cfg_a = scenario.clone();
        cfg_a.seed = seed;
        cfg_a.n_pedestrians = 4;
        cfg_a.planner = PlannerKind::Tmpcpp;
        let mut cfg_b = cfg_a.clone();
        cfg_b.planner = PlannerKind::Braking;
        let mut rng_a = ChaCha8Rng::seed_from_u64(cfg_a.seed);
        let mut rng_b = ChaCha8Rng::seed_from_u64(cfg_b.seed);
        let spawn_a = spawn_pedestrians(&cfg_a, &path, &mut rng_a);
        let spawn_b = spawn_pedestrians(&cfg_b, &path, &mut rng_b);
        for (x, y) in spawn_a.iter().zip(spawn_b.iter()) {
            if x.position != y.position || x.velocity != y.velocity {
                return Err(format!("spawn mismatch across planners at seed {seed}"));
            }
        }
    }
    Ok("byte-identical CSV rerun; paired spawns identical across planners".into())
}

/// Criterion 8: guidance warm starts beat cold starts on infeasibility.
fn criterion_warm_start_instrumentation() -> CriterionResult {
    let mut guidance = (0usize, 0usize);
    let mut cold = (0usize, 0usize);
    for seed in 1000..1006 {
        let mut cfg = ScenarioConfig::default();
        cfg.planner = PlannerKind::Tmpcpp;
        cfg.n_pedestrians = 4;
        cfg.seed = seed;
        cfg.tmpc.instrument_cold_start = true;
        let result = run_episode(&cfg);
        for (key, (bad, total)) in &result.metrics.infeasible_by_source {
            match key.as_str() {
                "guidance" => {
                    guidance.0 += bad;
                    guidance.1 += total;
                }
                "cold" => {
                    cold.0 += bad;
                    cold.1 += total;
                }
                _ => {}
            }
        }
    }
    if guidance.1 == 0 || cold.1 == 0 {
        return Err("missing warm-start samples".into());
    }
    let frac_g = guidance.0 as f64 / guidance.1 as f64;
    let frac_c = cold.0 as f64 / cold.1 as f64;
    if frac_g >= frac_c {
        return Err(format!(
            "guidance infeasibility {frac_g:.3} not below cold {frac_c:.3}"
        ));
    }
    Ok(format!(
        "infeasible fraction guidance {frac_g:.3} ({}/{}) < cold {frac_c:.3} ({}/{})",
        guidance.0, guidance.1, cold.0, cold.1
    ))
}

#[test]
fn acceptance() {
    let out_root = std::env::temp_dir().join(format!("tmpc_acceptance_{}", std::process::id()));
    std::fs::create_dir_all(&out_root).unwrap();

    let criteria: Vec<(&str, Box<dyn FnOnce() -> CriterionResult>)> = vec![
        (
            "table-1 qualitative reproduction",
            Box::new({
                let dir = out_root.clone();
                move || criterion_table(&dir)
            }),
        ),
        (
            "chance-constraint Monte-Carlo validity",
            Box::new(criterion_chance_validity),
        ),
        ("topology suite", Box::new(criterion_topology)),
        ("optimizer correctness", Box::new(criterion_optimizer)),
        ("real-time planning cycle", Box::new(criterion_real_time)),
        (
            "tracking controller",
            Box::new({
                let dir = out_root.clone();
                move || criterion_tracking(&dir)
            }),
        ),
        (
            "determinism",
            Box::new({
                let dir = out_root.clone();
                move || criterion_determinism(&dir)
            }),
        ),
        (
            "warm-start infeasibility instrumentation",
            Box::new(criterion_warm_start_instrumentation),
        ),
    ];

    let mut failures = Vec::new();
    let mut report = String::new();
    for (i, (name, run)) in criteria.into_iter().enumerate() {
        let started = std::time::Instant::now();
        let outcome = run();
        let elapsed = started.elapsed().as_secs_f64();
        let line = match &outcome {
            Ok(detail) => format!("[{}] {name} ... PASS ({elapsed:.1}s) {detail}", i + 1),
            Err(detail) => format!("[{}] {name} ... FAIL ({elapsed:.1}s) {detail}", i + 1),
        };
        println!("{line}");
        report.push_str(&line);
        report.push('\n');
        if outcome.is_err() {
            failures.push(name);
        }
    }
    let _ = std::fs::remove_dir_all(&out_root);
    assert!(
        failures.is_empty(),
        "acceptance criteria failed: {failures:?}\n{report}"
    );
}

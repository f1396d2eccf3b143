// phase timing probe
use std::sync::Arc;
use std::time::Instant;
use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use tmpc_core::path::{ReferencePath, Waypoint};
use tmpc_core::prediction::{propagate_cv, ObstacleState};
use tmpc_core::trajopt::*;
use tmpc_core::ocp::{self, OcpModel, SqpOptions};
use tmpc_core::Vec2;

fn main() {
    let pts: Vec<Waypoint> = (0..=10).map(|i| Waypoint::new(4.0 * i as f64, 0.0)).collect();
    let path = Arc::new(ReferencePath::fit(&pts).unwrap());
    let x0 = VehicleState { x: 0.0, y: 0.0, heading: 0.0, speed: 2.0, steering: 0.0, progress: 0.0 };
    let spots = [(10.0, 5.0, 0.0, -1.0), (16.0, -6.0, 0.2, 1.1), (22.0, 7.0, -0.1, -1.2), (27.0, -5.0, 0.0, 0.9)];
    let preds: Vec<_> = spots.iter().enumerate().map(|(i, &(x, y, vx, vy))| {
        propagate_cv(&ObstacleState::deterministic(i as u32, Vec2::new(x, y), Vec2::new(vx, vy), 0.3), 0.3, 0.2, 35).unwrap()
    }).collect();
    let mut problem = build_problem(x0, path.clone(), preds.clone(), PlannerWeights::default(), BicycleParams::default(), 0.2, 35, RiskAllocation::PerConstraint);
    let params = problem.params.clone();
    let (ws, wu) = cold_start(&x0, 0.2, 35, &params);
    let wsv: Vec<DVector<f64>> = ws.iter().map(|s| s.to_vector()).collect();
    let wuv: Vec<DVector<f64>> = wu.iter().map(|u| u.to_vector()).collect();

    // prepare()
    let t = Instant::now();
    for _ in 0..100 { problem.prepare(&wsv, &wuv); }
    println!("prepare: {:.3} ms", t.elapsed().as_secs_f64() * 10.0);

    // dynamics linearization (RK4 + jacobians over horizon)
    let t = Instant::now();
    for _ in 0..100 {
        for k in 0..35 {
            let _ = problem.step_jacobians(k, &wsv[k], &wuv[k]);
        }
    }
    println!("dyn jacobians: {:.3} ms", t.elapsed().as_secs_f64() * 10.0);

    // residual+ineq evals
    let t = Instant::now();
    for _ in 0..100 {
        for k in 0..35 {
            let _ = problem.stage_residuals(k, &wsv[k], &wuv[k]);
            let _ = problem.stage_residual_jacobians(k, &wsv[k], &wuv[k]);
            let _ = problem.stage_ineq(k, &wsv[k], &wuv[k]);
            let _ = problem.stage_ineq_jacobians(k, &wsv[k], &wuv[k]);
        }
    }
    println!("stage evals: {:.3} ms", t.elapsed().as_secs_f64() * 10.0);

    // hessian build
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let big_g = DMatrix::<f64>::from_fn(180, 70, |_, _| rng.gen_range(-1.0..1.0));
    let t = Instant::now();
    for _ in 0..100 { let _h = big_g.transpose() * &big_g * 2.0; }
    println!("hess gemm: {:.3} ms", t.elapsed().as_secs_f64() * 10.0);

    // QP with representative sizes
    let raw = DMatrix::<f64>::from_fn(70, 70, |_, _| rng.gen_range(-1.0..1.0));
    let h = raw.transpose() * &raw + DMatrix::identity(70, 70);
    let g = DVector::<f64>::from_fn(70, |_, _| rng.gen_range(-1.0..1.0));
    let c = DMatrix::<f64>::from_fn(700, 70, |_, _| rng.gen_range(-1.0..1.0));
    let b = DVector::from_element(700, -3.0);
    let t = Instant::now();
    for _ in 0..100 { let _ = tmpc_core::qp::solve(&h, &g, &c, &b).unwrap(); }
    println!("qp solve: {:.3} ms", t.elapsed().as_secs_f64() * 10.0);

    // full solve
    let t = Instant::now();
    for _ in 0..20 {
        let mut problem = build_problem(x0, path.clone(), preds.clone(), PlannerWeights::default(), BicycleParams::default(), 0.2, 35, RiskAllocation::PerConstraint);
        let _ = solve_planner(&mut problem, &ws, &wu, WarmStartKind::Cold, 0.25, &SqpOptions::default());
    }
    println!("full solve: {:.2} ms", t.elapsed().as_secs_f64() * 50.0);
}

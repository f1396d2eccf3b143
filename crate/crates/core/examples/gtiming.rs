use std::time::Instant;
use tmpc_core::guidance::*;
use tmpc_core::path::{ReferencePath, Waypoint};
use tmpc_core::prediction::{propagate_cv, ObstacleState};
use tmpc_core::trajopt::VehicleState;
use tmpc_core::Vec2;

fn main() {
    let pts: Vec<Waypoint> = (0..=10).map(|i| Waypoint::new(4.0 * i as f64, 0.0)).collect();
    let path = ReferencePath::fit(&pts).unwrap();
    let ego = VehicleState { x: 0.0, y: 0.0, heading: 0.0, speed: 2.0, steering: 0.0, progress: 0.0 };
    let params = GuidanceParams::default();
    let preds: Vec<_> = (0..4).map(|i| {
        let side = if i % 2 == 0 { 1.0 } else { -1.0 };
        propagate_cv(&ObstacleState::deterministic(i as u32, Vec2::new(8.0 + 5.0 * i as f64, side * 6.0), Vec2::new(0.0, -side * 1.2), 0.3), 0.3, 0.2, 35).unwrap()
    }).collect();
    // warm-up + measure
    for _ in 0..2 { let g = build_prm(&ego, &path, &preds, None, &params, 0.2, 35, 1); let _ = extract_paths(&g, &preds, &params, 0.2, 35); }
    let t = Instant::now();
    let runs = 20;
    let mut nodes = 0; let mut trajs = 0;
    for seed in 0..runs {
        let g = build_prm(&ego, &path, &preds, None, &params, 0.2, 35, seed);
        let e = extract_paths(&g, &preds, &params, 0.2, 35);
        nodes += g.n_nodes(); trajs += e.len();
    }
    println!("guidance build+extract: {:.2} ms (avg nodes {}, avg trajs {:.1})",
        t.elapsed().as_secs_f64() * 1000.0 / runs as f64, nodes / runs as usize, trajs as f64 / runs as f64);
}

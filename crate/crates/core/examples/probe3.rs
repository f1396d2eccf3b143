use tmpc_core::sim::*;
use tmpc_core::tmpc::*;
use tmpc_core::trajopt::VehicleState;
use tmpc_core::prediction::ObstacleState;
use std::sync::Arc;
use tmpc_core::path::ReferencePath;
use std::time::Instant;

fn main() {
    let mut cfg = ScenarioConfig::default();
    cfg.n_pedestrians = 4;
    cfg.seed = 11;
    let path = Arc::new(ReferencePath::fit(&cfg.padded_waypoints()).unwrap());
    let mut spawn_rng = rand::SeedableRng::seed_from_u64(cfg.seed);
    let peds = spawn_pedestrians(&cfg, &path, &mut spawn_rng);
    let mut planner = TmpcPlanner::new(path.clone(), cfg.effective_tmpc(), cfg.seed);
    let mut ego = VehicleState { x: 0.0, y: 0.0, heading: 0.0, speed: 0.0, steering: 0.0, progress: 0.0 };
    let mut peds_now = peds.clone();
    for cycle in 0..60 {
        let obstacles: Vec<ObstacleState> = peds_now.iter().map(|p| p.observe()).collect();
        let t = Instant::now();
        let result = planner.plan(&ego, &obstacles);
        let wall = t.elapsed().as_secs_f64() * 1000.0;
        if cycle % 5 == 0 {
            let iters: Vec<usize> = result.candidates.iter().map(|c| c.solution.iterations).collect();
            let feas: Vec<bool> = result.candidates.iter().map(|c| c.solution.feasible).collect();
            let times: Vec<f64> = result.candidates.iter().map(|c| (c.solve_time * 1000.0).round()).collect();
            println!("cycle {cycle}: {wall:5.1}ms guidance={} iters={:?} feas={:?} times={:?}", result.guidance_count, iters, feas, times);
        }
        let sel = result.selected();
        let u = sel.inputs[0];
        for _ in 0..2 {
            ego = tmpc_core::trajopt::bicycle_step(&ego, &u, 0.05, 2.7);
            for p in peds_now.iter_mut() { let v = p.velocity; p.position += v * 0.05; }
        }
        ego.progress = path.project(ego.position(), ego.progress).s;
    }
}

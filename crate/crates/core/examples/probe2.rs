use tmpc_core::sim::*;
use tmpc_core::tmpc::*;
use tmpc_core::trajopt::VehicleState;
use std::sync::Arc;
use tmpc_core::path::ReferencePath;

fn main() {
    let cfg = ScenarioConfig::default();
    let path = Arc::new(ReferencePath::fit(&cfg.waypoints).unwrap());
    let mut planner = TmpcPlanner::new(path.clone(), cfg.effective_tmpc(), 1);
    let mut ego = VehicleState { x: 0.0, y: 0.0, heading: 0.0, speed: 0.0, steering: 0.0, progress: 0.0 };
    for cycle in 0..12 {
        let result = planner.plan(&ego, &[]);
        let sel = result.selected();
        let v: Vec<f64> = sel.states.iter().take(8).map(|s| (s.speed * 100.0).round() / 100.0).collect();
        let a: Vec<f64> = sel.inputs.iter().take(6).map(|u| (u.accel * 100.0).round() / 100.0).collect();
        println!("cycle {cycle}: guidance={} cands={} sel_cost={:.4} feas={} speeds={:?} accels={:?}",
            result.guidance_count, result.candidates.len(), sel.cost, sel.feasible, v, a);
        // apply 0.1s: ZOH first input for 0.1
        let u = sel.inputs[0];
        let mut s = ego;
        for _ in 0..2 { s = tmpc_core::trajopt::bicycle_step(&s, &u, 0.05, 2.7); }
        ego = s;
        ego.progress = path.project(ego.position(), ego.progress).s;
        println!("   -> ego v={:.3} x={:.3}", ego.speed, ego.x);
    }
}

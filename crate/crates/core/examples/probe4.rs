use tmpc_core::sim::*;

fn main() {
    let seed: u64 = std::env::args().nth(1).and_then(|s| s.parse().ok()).unwrap_or(1006);
    let mut cfg = ScenarioConfig::default();
    cfg.planner = PlannerKind::TmpcppNoFallback;
    cfg.n_pedestrians = 4;
    cfg.seed = seed;
    cfg.record_log = true;
    let result = run_episode(&cfg);
    println!("collisions={} infeas_frac={:.3}", result.metrics.collisions, result.metrics.infeasible_cycle_fraction);
    let log = result.log.unwrap();
    // find first step where clearance < 0 by recomputing + nearby cycles
    for (i, step) in log.steps.iter().enumerate() {
        let min_d = step.pedestrians.iter().map(|(px, py)| {
            let dir = (step.ego.2.cos(), step.ego.2.sin());
            [-0.15f64, 1.35, 2.85].iter().map(|off| {
                let cx = step.ego.0 + off * dir.0;
                let cy = step.ego.1 + off * dir.1;
                ((cx - px).powi(2) + (cy - py).powi(2)).sqrt() - 1.3
            }).fold(f64::INFINITY, f64::min)
        }).fold(f64::INFINITY, f64::min);
        if min_d < 0.0 {
            println!("overlap at t={:.2} ego=({:.2},{:.2}) v={:.2}", step.t, step.ego.0, step.ego.1, step.ego.3);
            // dump nearby cycles
            for c in log.cycles.iter().filter(|c| c.t > step.t - 1.2 && c.t <= step.t + 0.05) {
                let feas: Vec<bool> = c.candidates.iter().map(|x| x.feasible).collect();
                let prov: Vec<&str> = c.candidates.iter().map(|x| x.provenance.as_str()).collect();
                println!("  cycle t={:.1} sel={} feas={:?} prov={:?}", c.t, c.selected, feas, prov);
            }
            let _ = i;
            break;
        }
    }
}

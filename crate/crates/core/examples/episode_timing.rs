use std::time::Instant;
use tmpc_core::sim::*;

fn main() {
    for (planner, peds) in [(PlannerKind::Tmpcpp, 4), (PlannerKind::Tmpcpp, 0), (PlannerKind::Lmpcc, 4), (PlannerKind::Braking, 4)] {
        let mut cfg = ScenarioConfig::default();
        cfg.planner = planner;
        cfg.n_pedestrians = peds;
        cfg.seed = 11;
        let t = Instant::now();
        let r = run_episode(&cfg);
        let m = &r.metrics;
        println!("{:>20} peds={} wall={:6.1}s sim_dur={:5.1}s coll={} to={} avgv={:.2} minclr={:5.2} infeas={:.2} mean_cycle={:.1}ms",
            planner.label(), peds, t.elapsed().as_secs_f64(), m.duration, m.collisions, m.timed_out,
            m.avg_velocity, m.min_clearance, m.infeasible_cycle_fraction, m.mean_cycle_time()*1000.0);
    }
}

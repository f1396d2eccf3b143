use tmpc_core::tracking::*;
use tmpc_core::trajopt::{VehicleState, ControlInput, bicycle_step};

fn main() {
    let p = SingleTrackParams::default();
    // Probe 1: steady-state turning at low speed
    let v = 2.0; let delta = 0.08;
    let mut st = SingleTrackState::at_rest(0.0, 0.0, 0.0);
    st.vx = v; st.steering = delta;
    let mut kin = VehicleState { x: 0.0, y: 0.0, heading: 0.0, speed: v, steering: delta, progress: 0.0 };
    let zk = ControlInput { accel: 0.0, steer_rate: 0.0 };
    for i in 0..1000 {
        st = single_track_step(&st, &TrackerCommand::ZERO, &p, 0.01);
        kin = bicycle_step(&kin, &zk, 0.01, p.lf + p.lr);
        st.vx = v;
        if i % 200 == 0 {
            println!("t={:4.1} st=({:7.3},{:7.3},psi {:6.4}, r {:7.5}, vy {:8.5}) kin=({:7.3},{:7.3},psi {:6.4})",
                i as f64 * 0.01, st.x, st.y, st.heading, st.yaw_rate, st.vy, kin.x, kin.y, kin.heading);
        }
    }
    println!("final gap {:.4}", (st.position() - kin.position()).norm());
    println!("kin r = {:.5}, st r = {:.5}", v * (delta as f64).tan() / (p.lf + p.lr), st.yaw_rate);

    // Probe 2: offset recovery
    let plan: Vec<VehicleState> = (0..=60).map(|k| VehicleState { x: k as f64 * 0.4, y: 0.0, heading: 0.0, speed: 2.0, steering: 0.0, progress: k as f64 * 0.4 }).collect();
    let reference = TrackerReference::from_plan(&plan).unwrap();
    let mut controller = MpccController::new(TrackerWeights::default(), p.clone());
    let mut state = SingleTrackState::at_rest(0.0, 0.5, 0.0);
    state.vx = 2.0;
    for step in 0..200 {
        let outcome = controller.solve(&state, Some(&reference));
        state = single_track_step(&state, &outcome.command, &p, 0.05);
        if step % 10 == 0 {
            println!("t={:4.2} y={:7.4} vx={:5.2} delta={:7.4} fx={:8.1} degraded={} cmd=({:7.3},{:8.1})",
                step as f64 * 0.05, state.y, state.vx, state.steering, state.fx, outcome.degraded, outcome.command.steer_rate, outcome.command.force_rate);
        }
    }
}

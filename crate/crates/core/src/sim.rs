//! Deterministic closed-loop simulator: randomized crossing-pedestrian
//! scenarios, plant integration, collision bookkeeping, the braking
//! baseline, and per-episode metrics.

use std::collections::BTreeMap;
use std::sync::Arc;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::path::{ReferencePath, Waypoint};
use crate::prediction::ObstacleState;
use crate::tmpc::{PlanningCycleResult, Provenance, TmpcConfig, TmpcPlanner};
use crate::tracking::{
    single_track_step, MpccController, SingleTrackParams, SingleTrackState, TrackerReference,
    TrackerWeights,
};
use crate::trajopt::{
    bicycle_step, BicycleParams, ControlInput, PlannerSolution, VehicleState, WarmStartKind,
};
use crate::{Error, Result, Vec2};

/// Which planner closes the loop.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PlannerKind {
    Tmpcpp,
    TmpcppNoFallback,
    Lmpcc,
    Braking,
}

impl PlannerKind {
    pub fn label(&self) -> &'static str {
        match self {
            PlannerKind::Tmpcpp => "tmpcpp",
            PlannerKind::TmpcppNoFallback => "tmpcpp_no_fallback",
            PlannerKind::Lmpcc => "lmpcc",
            PlannerKind::Braking => "braking",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PlantKind {
    Kinematic,
    SingleTrack,
}

/// Where pedestrians spawn and cross.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
#[serde(default)]
pub struct CrossingZone {
    /// Crossing points sampled along the path [m].
    pub s_min: f64,
    pub s_max: f64,
    /// Lateral spawn offset beyond the corridor, absolute value [m].
    pub offset_min: f64,
    pub offset_max: f64,
}

impl Default for CrossingZone {
    fn default() -> Self {
        Self {
            s_min: 8.0,
            s_max: 30.0,
            offset_min: 5.0,
            offset_max: 9.0,
        }
    }
}

/// Braking-baseline tuning.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
#[serde(default)]
pub struct BrakingConfig {
    /// Prediction window scanned for intrusions [s].
    pub lookahead: f64,
    /// Lateral corridor half-width that counts as blocking [m].
    pub corridor: f64,
    /// Stand-off distance kept from a blocking obstacle [m].
    pub standoff: f64,
    /// Distance over which the speed ramps back up [m].
    pub slow_zone: f64,
}

impl Default for BrakingConfig {
    fn default() -> Self {
        Self {
            lookahead: 6.0,
            corridor: 2.2,
            standoff: 4.0,
            slow_zone: 10.0,
        }
    }
}

/// One benchmark episode description. Serialized as the scenario JSON.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct ScenarioConfig {
    pub seed: u64,
    pub n_pedestrians: usize,
    pub waypoints: Vec<Waypoint>,
    /// Reference speed [m/s]; applied to the planner weights.
    pub v_ref: f64,
    /// Pedestrian speed range [m/s].
    pub ped_speed_range: (f64, f64),
    pub crossing_zone: CrossingZone,
    /// [s]
    pub time_limit: f64,
    pub planner: PlannerKind,
    pub plant: PlantKind,
    /// White-acceleration noise intensity for the simulated pedestrians
    /// (zero keeps them on exact constant-velocity tracks).
    pub ped_noise_accel: f64,
    /// [m]
    pub ped_radius: f64,
    /// [s]
    pub sim_dt: f64,
    pub ego_start_speed: f64,
    /// Extra centerline appended beyond the final waypoint so the planner
    /// never sees the path end inside its horizon; the episode still ends
    /// at the nominal length [m].
    pub path_padding: f64,
    pub tmpc: TmpcConfig,
    pub tracker_weights: TrackerWeights,
    pub single_track: SingleTrackParams,
    pub braking: BrakingConfig,
    /// Keep the full episode log in memory (for plotting/replay).
    pub record_log: bool,
}

impl Default for ScenarioConfig {
    fn default() -> Self {
        // Benchmark profile: the planning-cycle budget favors a tighter
        // per-solve iteration cap than the library default; marginal solves
        // are flagged by the final feasibility check either way.
        let mut tmpc = TmpcConfig::default();
        tmpc.sqp.max_iter = 10;
        Self {
            seed: 0,
            n_pedestrians: 0,
            waypoints: (0..=9)
                .map(|i| Waypoint::new(4.0 * i as f64, 0.0))
                .collect(),
            v_ref: 2.0,
            ped_speed_range: (0.8, 1.5),
            crossing_zone: CrossingZone::default(),
            time_limit: 60.0,
            planner: PlannerKind::Tmpcpp,
            plant: PlantKind::Kinematic,
            ped_noise_accel: 0.0,
            ped_radius: 0.3,
            sim_dt: 0.05,
            ego_start_speed: 0.0,
            path_padding: 25.0,
            tmpc,
            tracker_weights: TrackerWeights::default(),
            single_track: SingleTrackParams::default(),
            braking: BrakingConfig::default(),
            record_log: false,
        }
    }
}

impl ScenarioConfig {
    /// Waypoints with the padding extension along the final tangent.
    pub fn padded_waypoints(&self) -> Vec<Waypoint> {
        let mut pts = self.waypoints.clone();
        if self.path_padding > 0.0 && pts.len() >= 2 {
            let last = pts[pts.len() - 1];
            let prev = pts[pts.len() - 2];
            let dir = Vec2::new(last.x - prev.x, last.y - prev.y).normalize();
            let n_extra = (self.path_padding / 5.0).ceil() as usize;
            for i in 1..=n_extra {
                let d = self.path_padding * i as f64 / n_extra as f64;
                pts.push(Waypoint::new(last.x + dir.x * d, last.y + dir.y * d));
            }
        }
        pts
    }

    /// Planner configuration with the scenario-level overrides applied.
    pub fn effective_tmpc(&self) -> TmpcConfig {
        let mut cfg = self.tmpc.clone();
        cfg.weights.v_ref = self.v_ref;
        cfg.guidance.v_ref = self.v_ref;
        match self.planner {
            PlannerKind::Tmpcpp => {}
            PlannerKind::TmpcppNoFallback => cfg.use_fallback = false,
            PlannerKind::Lmpcc => cfg.n_guided = 0,
            PlannerKind::Braking => {}
        }
        cfg
    }
}

/// Per-episode outcome metrics.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MetricsRecord {
    /// [s]
    pub duration: f64,
    /// Distinct pedestrians contacted during the episode.
    pub collisions: usize,
    pub timed_out: bool,
    /// Path progress per second [m/s].
    pub avg_velocity: f64,
    /// Smallest disc-to-disc clearance observed [m].
    pub min_clearance: f64,
    /// Fraction of planning cycles whose selected trajectory was flagged
    /// infeasible.
    pub infeasible_cycle_fraction: f64,
    /// Wall-clock planning time per cycle [s].
    pub cycle_times: Vec<f64>,
    /// (infeasible, total) solver outcomes per warm-start source.
    pub infeasible_by_source: BTreeMap<String, (usize, usize)>,
    /// Episode aborted by a planner failure.
    pub failed: bool,
}

impl MetricsRecord {
    pub fn mean_cycle_time(&self) -> f64 {
        if self.cycle_times.is_empty() {
            0.0
        } else {
            self.cycle_times.iter().sum::<f64>() / self.cycle_times.len() as f64
        }
    }

    /// Deterministic comparison key (timing excluded: wall-clock is the one
    /// field that legitimately varies between reruns).
    pub fn determinism_key(&self) -> String {
        format!(
            "{:.12}|{}|{}|{:.12}|{:.12}|{:.12}|{:?}|{}",
            self.duration,
            self.collisions,
            self.timed_out,
            self.avg_velocity,
            self.min_clearance,
            self.infeasible_cycle_fraction,
            self.infeasible_by_source,
            self.failed,
        )
    }
}

/// Simulated pedestrian.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Pedestrian {
    pub id: u32,
    pub position: Vec2,
    pub velocity: Vec2,
    pub radius: f64,
}

impl Pedestrian {
    pub fn observe(&self) -> ObstacleState {
        ObstacleState::deterministic(self.id, self.position, self.velocity, self.radius)
    }
}

/// Spawn crossing pedestrians: a uniformly sampled lateral offset outside
/// the corridor on a random side, walking at a uniform speed toward a
/// crossing point on the path.
pub fn spawn_pedestrians(
    cfg: &ScenarioConfig,
    path: &ReferencePath,
    rng: &mut ChaCha8Rng,
) -> Vec<Pedestrian> {
    (0..cfg.n_pedestrians)
        .map(|i| {
            let side = if rng.gen::<bool>() { 1.0 } else { -1.0 };
            let s_cross = rng.gen_range(cfg.crossing_zone.s_min..cfg.crossing_zone.s_max);
            let offset = rng.gen_range(cfg.crossing_zone.offset_min..cfg.crossing_zone.offset_max);
            let speed = rng.gen_range(cfg.ped_speed_range.0..cfg.ped_speed_range.1);
            let frame = path.frame(s_cross).expect("finite crossing point");
            let start = frame.position + frame.normal * (side * offset);
            let dir = (frame.position - start).normalize();
            Pedestrian {
                id: i as u32,
                position: start,
                velocity: dir * speed,
                radius: cfg.ped_radius,
            }
        })
        .collect()
}

/// Ego plant state (kinematic bicycle or single track).
#[derive(Debug, Clone)]
pub enum EgoPlant {
    Kinematic(VehicleState),
    SingleTrack(SingleTrackState),
}

impl EgoPlant {
    /// Rear-axle pose used for footprint discs and the planner state.
    pub fn planar_pose(&self, params: &SingleTrackParams) -> (Vec2, f64) {
        match self {
            EgoPlant::Kinematic(s) => (s.position(), s.heading),
            EgoPlant::SingleTrack(s) => {
                let dir = Vec2::new(s.heading.cos(), s.heading.sin());
                (s.position() - dir * params.lr, s.heading)
            }
        }
    }

    pub fn speed(&self) -> f64 {
        match self {
            EgoPlant::Kinematic(s) => s.speed,
            EgoPlant::SingleTrack(s) => s.vx,
        }
    }
}

/// World snapshot advanced by the loop.
pub struct World {
    pub time: f64,
    pub ego: EgoPlant,
    pub pedestrians: Vec<Pedestrian>,
    pub path: Arc<ReferencePath>,
}

/// Advance pedestrians one step: constant velocity plus optional white
/// acceleration noise (same discrete model the predictor assumes).
pub fn step_pedestrians(
    pedestrians: &mut [Pedestrian],
    dt: f64,
    q_accel: f64,
    rng: &mut ChaCha8Rng,
) {
    for ped in pedestrians.iter_mut() {
        if q_accel > 0.0 {
            let std = q_accel.sqrt();
            let ax: f64 = rng.sample::<f64, _>(StandardNormal) * std;
            let ay: f64 = rng.sample::<f64, _>(StandardNormal) * std;
            let a = Vec2::new(ax, ay);
            ped.position += ped.velocity * dt + a * (0.5 * dt * dt);
            ped.velocity += a * dt;
        } else {
            ped.position += ped.velocity * dt;
        }
    }
}

/// Disc-overlap collision test between the ego footprint and pedestrians.
/// Touching circles (distance exactly equal to the radii sum) do not count.
pub fn collision_check(
    rear_axle: Vec2,
    heading: f64,
    bicycle: &BicycleParams,
    pedestrians: &[Pedestrian],
) -> bool {
    colliding_ids(rear_axle, heading, bicycle, pedestrians)
        .next()
        .is_some()
}

fn colliding_ids<'a>(
    rear_axle: Vec2,
    heading: f64,
    bicycle: &'a BicycleParams,
    pedestrians: &'a [Pedestrian],
) -> impl Iterator<Item = u32> + 'a {
    let dir = Vec2::new(heading.cos(), heading.sin());
    pedestrians.iter().filter_map(move |ped| {
        bicycle
            .disc_offsets
            .iter()
            .any(|off| {
                let center = rear_axle + dir * *off;
                (center - ped.position).norm() < bicycle.disc_radius + ped.radius
            })
            .then_some(ped.id)
    })
}

fn min_clearance(
    rear_axle: Vec2,
    heading: f64,
    bicycle: &BicycleParams,
    pedestrians: &[Pedestrian],
) -> f64 {
    let dir = Vec2::new(heading.cos(), heading.sin());
    let mut best = f64::INFINITY;
    for ped in pedestrians {
        for off in &bicycle.disc_offsets {
            let center = rear_axle + dir * *off;
            best = best.min((center - ped.position).norm() - bicycle.disc_radius - ped.radius);
        }
    }
    best
}

/// Path-following braking baseline: holds the reference speed, brakes in
/// proportion to predicted intrusion ahead, resumes when clear.
pub struct BrakingPlanner {
    pub cfg: BrakingConfig,
    pub v_ref: f64,
    pub bicycle: BicycleParams,
    pub horizon_steps: usize,
    pub dt: f64,
}

impl BrakingPlanner {
    pub fn new(cfg: BrakingConfig, v_ref: f64, bicycle: BicycleParams) -> Self {
        Self {
            cfg,
            v_ref,
            bicycle,
            horizon_steps: 35,
            dt: 0.2,
        }
    }

    /// Closest blocking distance ahead of `s_ego`, if any.
    fn blocking_distance(
        &self,
        s_ego: f64,
        path: &ReferencePath,
        obstacles: &[ObstacleState],
    ) -> Option<f64> {
        let mut closest: Option<f64> = None;
        let steps = (self.cfg.lookahead / self.dt).ceil() as usize;
        for obs in obstacles {
            for k in 0..=steps {
                let t = k as f64 * self.dt;
                let p = obs.position + obs.velocity * t;
                let proj = path.project(p, s_ego);
                let lateral = (p - path.position(proj.s)).norm();
                let ahead = proj.s - s_ego;
                if lateral <= self.cfg.corridor && ahead > -1.0 {
                    closest = Some(closest.map_or(ahead, |c: f64| c.min(ahead)));
                }
            }
        }
        closest
    }

    /// Produce a planner-compatible trajectory by rolling the braking law.
    pub fn plan(
        &self,
        ego: &VehicleState,
        obstacles: &[ObstacleState],
        path: &ReferencePath,
    ) -> PlannerSolution {
        let blocked = self.blocking_distance(ego.progress, path, obstacles);
        // The blocking distance is rear-axle referenced; keep the standoff
        // ahead of the footprint's front edge.
        let front_extent = self
            .bicycle
            .disc_offsets
            .iter()
            .fold(0.0_f64, |acc, off| acc.max(*off))
            + self.bicycle.disc_radius;
        let mut states = vec![*ego];
        let mut inputs = Vec::with_capacity(self.horizon_steps);
        for k in 0..self.horizon_steps {
            let st = states[k];
            // Speed command from intrusion.
            let v_cmd = match blocked {
                Some(d) => {
                    let gap =
                        d - (st.progress - ego.progress) - front_extent - self.cfg.standoff;
                    (self.v_ref * (gap / self.cfg.slow_zone).clamp(0.0, 1.0)).max(0.0)
                }
                None => self.v_ref,
            };
            let accel =
                ((v_cmd - st.speed) / self.dt).clamp(-self.bicycle.a_max, self.bicycle.a_max);
            // Steering: regulate the contouring error toward the centerline.
            let (e_c, _) = path
                .contouring_errors(st.position(), st.progress.clamp(0.0, path.total_length()))
                .unwrap_or((0.0, 0.0));
            let theta = path.heading(st.progress.clamp(0.0, path.total_length()));
            let heading_err = {
                let raw = st.heading - theta;
                let r = raw.rem_euclid(std::f64::consts::TAU);
                if r > std::f64::consts::PI {
                    r - std::f64::consts::TAU
                } else {
                    r
                }
            };
            let delta_des = (-0.6 * e_c - 1.2 * heading_err)
                .clamp(-self.bicycle.delta_max, self.bicycle.delta_max);
            let steer_rate = ((delta_des - st.steering) / self.dt)
                .clamp(-self.bicycle.omega_max, self.bicycle.omega_max);
            let u = ControlInput { accel, steer_rate };
            let mut next = bicycle_step(&st, &u, self.dt, self.bicycle.wheelbase);
            next.speed = next.speed.clamp(self.bicycle.v_min, self.bicycle.v_max);
            states.push(next);
            inputs.push(u);
        }
        PlannerSolution {
            states,
            inputs,
            cost: 0.0,
            feasible: true,
            kkt_residual: 0.0,
            iterations: 0,
            soft_retry: false,
            max_violation: 0.0,
            signature: Default::default(),
            warm_start: WarmStartKind::BrakingRollout,
        }
    }
}

/// Structured episode log for replay and plotting.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct LogMeta {
    pub planner: PlannerKind,
    pub seed: u64,
    pub n_pedestrians: usize,
    pub path_polyline: Vec<(f64, f64)>,
    pub total_length: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct WorldStep {
    pub t: f64,
    /// (x, y, heading, speed) of the rear axle.
    pub ego: (f64, f64, f64, f64),
    pub pedestrians: Vec<(f64, f64)>,
    /// Per-axle friction margins (single-track plant only) [N].
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub friction_margins: Option<(f64, f64)>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CandidateLog {
    pub cost: f64,
    pub feasible: bool,
    pub signature: String,
    pub provenance: String,
    pub iterations: usize,
    pub polyline: Vec<(f64, f64)>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PredictionLog {
    pub id: u32,
    pub means: Vec<(f64, f64)>,
    /// 2x2 covariance entries (xx, xy, yy) aligned with `means`.
    pub covariances: Vec<(f64, f64, f64)>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CycleLog {
    pub t: f64,
    pub selected: usize,
    pub cycle_time: f64,
    pub candidates: Vec<CandidateLog>,
    /// Selected trajectory as (x, y, speed).
    pub trajectory: Vec<(f64, f64, f64)>,
    pub predictions: Vec<PredictionLog>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum LogLine {
    Meta(LogMeta),
    Step(WorldStep),
    Cycle(CycleLog),
}

#[derive(Debug, Clone, Default)]
pub struct EpisodeLog {
    pub meta: Option<LogMeta>,
    pub steps: Vec<WorldStep>,
    pub cycles: Vec<CycleLog>,
}

impl EpisodeLog {
    pub fn to_jsonl(&self) -> String {
        let mut out = String::new();
        if let Some(meta) = &self.meta {
            out.push_str(&serde_json::to_string(&LogLine::Meta(meta.clone())).unwrap());
            out.push('\n');
        }
        // Steps first, then cycles; replay tools sort by time.
        for step in &self.steps {
            out.push_str(&serde_json::to_string(&LogLine::Step(step.clone())).unwrap());
            out.push('\n');
        }
        for cycle in &self.cycles {
            out.push_str(&serde_json::to_string(&LogLine::Cycle(cycle.clone())).unwrap());
            out.push('\n');
        }
        out
    }

    pub fn from_jsonl(text: &str) -> Result<Self> {
        let mut log = EpisodeLog::default();
        for (i, line) in text.lines().enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            let parsed: LogLine = serde_json::from_str(line).map_err(|e| Error::Parse {
                line: i + 1,
                message: e.to_string(),
            })?;
            match parsed {
                LogLine::Meta(m) => log.meta = Some(m),
                LogLine::Step(s) => log.steps.push(s),
                LogLine::Cycle(c) => log.cycles.push(c),
            }
        }
        Ok(log)
    }
}

/// Episode outcome: metrics plus the optional structured log.
pub struct EpisodeResult {
    pub metrics: MetricsRecord,
    pub log: Option<EpisodeLog>,
}

enum ActivePlanner {
    Tmpc(Box<TmpcPlanner>),
    Braking(BrakingPlanner),
}

fn record_cycle(
    result: &PlanningCycleResult,
    infeasible_by_source: &mut BTreeMap<String, (usize, usize)>,
) {
    let mut bump = |key: &str, infeasible: bool| {
        let entry = infeasible_by_source
            .entry(key.to_string())
            .or_insert((0, 0));
        entry.1 += 1;
        if infeasible {
            entry.0 += 1;
        }
    };
    for cand in &result.candidates {
        if matches!(cand.provenance, Provenance::Emergency) {
            continue;
        }
        let key = match cand.solution.warm_start {
            WarmStartKind::Guidance => "guidance",
            WarmStartKind::ShiftedPrevious => "shifted_previous",
            WarmStartKind::BrakingRollout => "braking_rollout",
            WarmStartKind::Cold => "cold",
        };
        bump(key, !cand.solution.feasible);
    }
    if let Some(probe) = &result.cold_probe {
        bump("cold", !probe.feasible);
    }
}

/// Run one closed-loop episode. The loop advances at `sim_dt`, replans at
/// the planner period, and (for the single-track plant) tracks the selected
/// trajectory with the contouring controller at every sim step.
pub fn run_episode(cfg: &ScenarioConfig) -> EpisodeResult {
    let nominal_length = ReferencePath::fit(&cfg.waypoints)
        .expect("valid scenario waypoints")
        .total_length();
    let path = Arc::new(
        ReferencePath::fit(&cfg.padded_waypoints()).expect("valid scenario waypoints"),
    );
    let mut spawn_rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut noise_rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ NOISE_STREAM_SALT);
    let mut pedestrians = spawn_pedestrians(cfg, &path, &mut spawn_rng);

    let tmpc_cfg = cfg.effective_tmpc();
    let bicycle = tmpc_cfg.bicycle.clone();
    let start_frame = path.frame(0.0).expect("path start");
    let start_state = VehicleState {
        x: start_frame.position.x,
        y: start_frame.position.y,
        heading: start_frame.tangent.y.atan2(start_frame.tangent.x),
        speed: cfg.ego_start_speed,
        steering: 0.0,
        progress: 0.0,
    };

    let mut ego = match cfg.plant {
        PlantKind::Kinematic => EgoPlant::Kinematic(start_state),
        PlantKind::SingleTrack => {
            let dir = Vec2::new(start_state.heading.cos(), start_state.heading.sin());
            let cg = start_state.position() + dir * cfg.single_track.lr;
            let mut st = SingleTrackState::at_rest(cg.x, cg.y, start_state.heading);
            st.vx = cfg.ego_start_speed;
            EgoPlant::SingleTrack(st)
        }
    };

    let mut planner = match cfg.planner {
        PlannerKind::Braking => ActivePlanner::Braking(BrakingPlanner::new(
            cfg.braking,
            cfg.v_ref,
            bicycle.clone(),
        )),
        _ => ActivePlanner::Tmpc(Box::new(TmpcPlanner::new(
            path.clone(),
            tmpc_cfg.clone(),
            cfg.seed,
        ))),
    };
    let mut tracker = MpccController::new(cfg.tracker_weights, cfg.single_track.clone());

    let replan_every = (tmpc_cfg.replan_period / cfg.sim_dt).round().max(1.0) as usize;
    let mut current_plan: Option<PlannerSolution> = None;
    let mut tracker_reference: Option<TrackerReference> = None;
    let mut plan_age = 0.0;

    let mut log = cfg.record_log.then(|| EpisodeLog {
        meta: Some(LogMeta {
            planner: cfg.planner,
            seed: cfg.seed,
            n_pedestrians: cfg.n_pedestrians,
            path_polyline: (0..=200)
                .map(|i| {
                    let s = nominal_length * i as f64 / 200.0;
                    let p = path.position(s);
                    (p.x, p.y)
                })
                .collect(),
            total_length: nominal_length,
        }),
        ..EpisodeLog::default()
    });

    let mut metrics = MetricsRecord {
        duration: 0.0,
        collisions: 0,
        timed_out: false,
        avg_velocity: 0.0,
        min_clearance: f64::INFINITY,
        infeasible_cycle_fraction: 0.0,
        cycle_times: Vec::new(),
        infeasible_by_source: BTreeMap::new(),
        failed: false,
    };

    let mut time = 0.0;
    let mut step_index = 0usize;
    let mut collided: Vec<u32> = Vec::new();
    let mut infeasible_cycles = 0usize;
    let mut total_cycles = 0usize;
    let mut progress = 0.0;
    let start_progress = 0.0;

    'episode: loop {
        // Replan at the planner rate.
        if step_index % replan_every == 0 {
            let (rear_axle, heading) = ego.planar_pose(&cfg.single_track);
            let proj = path.project(rear_axle, progress);
            progress = proj.s;
            let planner_state = match &ego {
                EgoPlant::Kinematic(s) => VehicleState {
                    progress,
                    ..*s
                },
                EgoPlant::SingleTrack(s) => VehicleState {
                    x: rear_axle.x,
                    y: rear_axle.y,
                    heading,
                    speed: s.vx.max(0.0),
                    steering: s.steering,
                    progress,
                },
            };
            let obstacles: Vec<ObstacleState> =
                pedestrians.iter().map(Pedestrian::observe).collect();

            let wall = Instant::now();
            let (plan, cycle_log) = match &mut planner {
                ActivePlanner::Tmpc(tmpc) => {
                    let result = std::panic::catch_unwind(std::panic::AssertUnwindSafe(|| {
                        tmpc.plan(&planner_state, &obstacles)
                    }));
                    match result {
                        Ok(result) => {
                            total_cycles += 1;
                            if !result.selected().feasible {
                                infeasible_cycles += 1;
                            }
                            record_cycle(&result, &mut metrics.infeasible_by_source);
                            let cycle_log = log.is_some().then(|| CycleLog {
                                t: time,
                                selected: result.selected_index,
                                cycle_time: result.cycle_time,
                                candidates: result
                                    .candidates
                                    .iter()
                                    .map(|c| CandidateLog {
                                        cost: c.solution.cost,
                                        feasible: c.solution.feasible,
                                        signature: c.solution.signature.describe(),
                                        provenance: format!("{:?}", c.provenance),
                                        iterations: c.solution.iterations,
                                        polyline: c
                                            .solution
                                            .states
                                            .iter()
                                            .map(|s| (s.x, s.y))
                                            .collect(),
                                    })
                                    .collect(),
                                trajectory: result
                                    .selected()
                                    .states
                                    .iter()
                                    .map(|s| (s.x, s.y, s.speed))
                                    .collect(),
                                predictions: tmpc
                                    .predict(&obstacles)
                                    .iter()
                                    .map(|p| PredictionLog {
                                        id: p.obstacle_id,
                                        means: p.means.iter().map(|m| (m.x, m.y)).collect(),
                                        covariances: p
                                            .covariances
                                            .iter()
                                            .map(|c| (c[(0, 0)], c[(0, 1)], c[(1, 1)]))
                                            .collect(),
                                    })
                                    .collect(),
                            });
                            (result.selected().clone(), cycle_log)
                        }
                        Err(_) => {
                            metrics.failed = true;
                            break 'episode;
                        }
                    }
                }
                ActivePlanner::Braking(braking) => {
                    total_cycles += 1;
                    let plan = braking.plan(&planner_state, &obstacles, &path);
                    let cycle_log = log.is_some().then(|| CycleLog {
                        t: time,
                        selected: 0,
                        cycle_time: 0.0,
                        candidates: Vec::new(),
                        trajectory: plan.states.iter().map(|s| (s.x, s.y, s.speed)).collect(),
                        predictions: Vec::new(),
                    });
                    (plan, cycle_log)
                }
            };
            metrics.cycle_times.push(wall.elapsed().as_secs_f64());
            if let (Some(log), Some(cycle_log)) = (log.as_mut(), cycle_log) {
                log.cycles.push(cycle_log);
            }
            tracker_reference = TrackerReference::from_plan(&plan.states);
            current_plan = Some(plan);
            plan_age = 0.0;
        }

        // Advance the ego plant.
        match &mut ego {
            EgoPlant::Kinematic(state) => {
                let plan = current_plan.as_ref().expect("plan exists after replan");
                let idx = ((plan_age / tmpc_cfg.dt).floor() as usize)
                    .min(plan.inputs.len().saturating_sub(1));
                let input = plan.inputs[idx];
                let mut next = bicycle_step(state, &input, cfg.sim_dt, bicycle.wheelbase);
                next.speed = next.speed.clamp(bicycle.v_min, bicycle.v_max);
                next.steering = next.steering.clamp(-bicycle.delta_max, bicycle.delta_max);
                *state = next;
            }
            EgoPlant::SingleTrack(state) => {
                let outcome = tracker.solve(state, tracker_reference.as_ref());
                *state = single_track_step(state, &outcome.command, &cfg.single_track, cfg.sim_dt);
            }
        }
        step_pedestrians(
            &mut pedestrians,
            cfg.sim_dt,
            cfg.ped_noise_accel,
            &mut noise_rng,
        );
        time += cfg.sim_dt;
        plan_age += cfg.sim_dt;
        step_index += 1;

        // Bookkeeping.
        let (rear_axle, heading) = ego.planar_pose(&cfg.single_track);
        let proj = path.project(rear_axle, progress);
        progress = proj.s;
        metrics.min_clearance = metrics
            .min_clearance
            .min(min_clearance(rear_axle, heading, &bicycle, &pedestrians));
        for id in colliding_ids(rear_axle, heading, &bicycle, &pedestrians) {
            if !collided.contains(&id) {
                collided.push(id);
            }
        }
        if let Some(log) = log.as_mut() {
            let friction_margins = match &ego {
                EgoPlant::SingleTrack(st) => {
                    let m = crate::tracking::friction_circle_margin(st, &cfg.single_track);
                    Some((m[0], m[1]))
                }
                EgoPlant::Kinematic(_) => None,
            };
            log.steps.push(WorldStep {
                t: time,
                ego: (rear_axle.x, rear_axle.y, heading, ego.speed()),
                pedestrians: pedestrians.iter().map(|p| (p.position.x, p.position.y)).collect(),
                friction_margins,
            });
        }

        if progress >= nominal_length - 1e-9 {
            break;
        }
        if time >= cfg.time_limit {
            metrics.timed_out = true;
            break;
        }
    }

    metrics.duration = time;
    metrics.collisions = collided.len();
    metrics.avg_velocity = if time > 0.0 {
        (progress - start_progress) / time
    } else {
        0.0
    };
    metrics.infeasible_cycle_fraction = if total_cycles > 0 {
        infeasible_cycles as f64 / total_cycles as f64
    } else {
        0.0
    };
    if metrics.min_clearance == f64::INFINITY {
        metrics.min_clearance = f64::NAN;
    }
    EpisodeResult { metrics, log }
}

/// Seed-stream separator so spawn randomness and motion noise are
/// independent streams of the same episode seed.
const NOISE_STREAM_SALT: u64 = 0x9137_55b8_22aa_71c4;

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    fn base_config() -> ScenarioConfig {
        ScenarioConfig::default()
    }

    #[test]
    fn spawns_are_deterministic_and_cross_corridor() {
        let mut cfg = base_config();
        cfg.n_pedestrians = 4;
        let path = ReferencePath::fit(&cfg.waypoints).unwrap();
        for seed in 0..25 {
            cfg.seed = seed;
            let mut rng_a = ChaCha8Rng::seed_from_u64(cfg.seed);
            let mut rng_b = ChaCha8Rng::seed_from_u64(cfg.seed);
            let a = spawn_pedestrians(&cfg, &path, &mut rng_a);
            let b = spawn_pedestrians(&cfg, &path, &mut rng_b);
            assert_eq!(a.len(), 4);
            for (x, y) in a.iter().zip(b.iter()) {
                assert_eq!(x.position, y.position);
                assert_eq!(x.velocity, y.velocity);
            }
            // Geometric assertion: the straight-line track crosses the
            // corridor (lateral span brackets zero).
            for ped in &a {
                let proj0 = path.project(ped.position, 0.0);
                let lat0 = (ped.position - path.position(proj0.s)).norm();
                let far = ped.position + ped.velocity * 60.0;
                let projf = path.project(far, proj0.s);
                let latf = (far - path.position(projf.s)).norm();
                assert!(lat0 > 4.0, "starts outside the corridor");
                // It reaches (and passes) the centerline.
                let reached = (0..600).any(|k| {
                    let p = ped.position + ped.velocity * (k as f64 * 0.1);
                    let proj = path.project(p, proj0.s);
                    (p - path.position(proj.s)).norm() < 0.5
                });
                assert!(reached, "pedestrian never crosses (final lateral {latf})");
            }
        }
    }

    #[test]
    fn empty_spawn_and_noiseless_motion() {
        let cfg = base_config();
        let path = ReferencePath::fit(&cfg.waypoints).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        assert!(spawn_pedestrians(&cfg, &path, &mut rng).is_empty());

        let mut peds = vec![Pedestrian {
            id: 0,
            position: Vec2::new(1.0, 2.0),
            velocity: Vec2::new(0.5, -0.25),
            radius: 0.3,
        }];
        let mut noise = ChaCha8Rng::seed_from_u64(2);
        for _ in 0..100 {
            step_pedestrians(&mut peds, 0.05, 0.0, &mut noise);
        }
        let expect = Vec2::new(1.0, 2.0) + Vec2::new(0.5, -0.25) * 5.0;
        assert!((peds[0].position - expect).norm() < 1e-12);
    }

    #[test]
    fn pedestrian_noise_matches_prediction_covariance() {
        // Ensemble variance of the noisy walker at 4 s vs the predictor.
        let q = 0.3;
        let dt = 0.05;
        let steps = 80; // 4 s
        let runs = 10_000;
        let mut sum = Vec2::zeros();
        let mut sum_sq = Vec2::zeros();
        for seed in 0..runs {
            let mut peds = vec![Pedestrian {
                id: 0,
                position: Vec2::zeros(),
                velocity: Vec2::new(1.0, 0.0),
                radius: 0.3,
            }];
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            for _ in 0..steps {
                step_pedestrians(&mut peds, dt, q, &mut rng);
            }
            let dev = peds[0].position - Vec2::new(4.0, 0.0);
            sum += dev;
            sum_sq += dev.component_mul(&dev);
        }
        let n = runs as f64;
        let var_x = sum_sq.x / n - (sum.x / n).powi(2);
        // Prediction module covariance over the same grid.
        let pred = crate::prediction::propagate_cv(
            &ObstacleState::deterministic(0, Vec2::zeros(), Vec2::new(1.0, 0.0), 0.3),
            q,
            dt,
            steps,
        )
        .unwrap();
        let expect = pred.covariances[steps][(0, 0)];
        assert!(
            (var_x - expect).abs() / expect < 0.05,
            "ensemble {var_x} vs predicted {expect}"
        );
    }

    #[test]
    fn collision_boundary_convention() {
        let bicycle = BicycleParams::default();
        let sum = bicycle.disc_radius + 0.3;
        let make_ped = |x: f64| Pedestrian {
            id: 0,
            position: Vec2::new(x, 0.0),
            velocity: Vec2::zeros(),
            radius: 0.3,
        };
        // Disc centers sit at the configured offsets; use the front disc.
        let front = bicycle.disc_offsets.last().copied().unwrap();
        assert!(!collision_check(
            Vec2::zeros(),
            0.0,
            &bicycle,
            &[make_ped(front + sum)]
        ));
        assert!(collision_check(
            Vec2::zeros(),
            0.0,
            &bicycle,
            &[make_ped(front + sum - 1e-9)]
        ));
        assert!(collision_check(Vec2::zeros(), 0.0, &bicycle, &[make_ped(0.0)]));
        assert!(!collision_check(
            Vec2::zeros(),
            0.0,
            &bicycle,
            &[make_ped(10.0 + front)]
        ));
    }

    #[test]
    fn braking_planner_tracks_and_brakes() {
        let cfg = base_config();
        let path = ReferencePath::fit(&cfg.waypoints).unwrap();
        let planner = BrakingPlanner::new(cfg.braking, 2.0, BicycleParams::default());
        let ego = VehicleState {
            x: 0.0,
            y: 0.0,
            heading: 0.0,
            speed: 2.0,
            steering: 0.0,
            progress: 0.0,
        };
        // Empty world: the rollout holds the reference speed.
        let plan = planner.plan(&ego, &[], &path);
        for st in &plan.states[2..] {
            assert!((st.speed - 2.0).abs() < 0.02 * 2.0);
        }
        // A pedestrian standing on the path ahead forces a slowdown.
        let blocker = ObstacleState::deterministic(0, Vec2::new(8.0, 0.0), Vec2::zeros(), 0.3);
        let plan = planner.plan(&ego, &[blocker], &path);
        let min_speed = plan.states.iter().map(|s| s.speed).fold(f64::INFINITY, f64::min);
        assert!(min_speed < 1.0, "did not brake: {min_speed}");
    }

    #[test]
    fn braking_episode_with_permanent_blocker_times_out() {
        let mut cfg = base_config();
        cfg.planner = PlannerKind::Braking;
        cfg.time_limit = 30.0;
        // One pedestrian standing permanently on the path: spawn it by hand
        // through a custom zone that pins it to the centerline.
        cfg.n_pedestrians = 1;
        cfg.ped_speed_range = (1e-6, 2e-6); // effectively standing
        cfg.crossing_zone = CrossingZone {
            s_min: 17.9,
            s_max: 18.0,
            offset_min: 0.05,
            offset_max: 0.06,
        };
        let result = run_episode(&cfg);
        assert!(result.metrics.timed_out);
        assert_eq!(result.metrics.collisions, 0);
        // Asymptotic stop short of the blocker with positive clearance.
        assert!(result.metrics.min_clearance > 0.5);
    }

    #[test]
    fn empty_world_episode_completes_near_reference_speed() {
        let mut cfg = base_config();
        cfg.planner = PlannerKind::Braking;
        let result = run_episode(&cfg);
        let m = &result.metrics;
        assert!(!m.timed_out);
        assert_eq!(m.collisions, 0);
        // 36 m at 2 m/s with a standing start.
        assert!(m.duration > 15.0 && m.duration < 22.0, "duration {}", m.duration);
        assert_abs_diff_eq!(
            m.avg_velocity * m.duration,
            36.0,
            epsilon = 1e-6 * 36.0 + 0.2
        );
    }

    #[test]
    fn episode_determinism() {
        let mut cfg = base_config();
        cfg.planner = PlannerKind::Tmpcpp;
        cfg.n_pedestrians = 2;
        cfg.seed = 5;
        cfg.time_limit = 8.0; // truncated run is enough for determinism
        cfg.record_log = true;
        let a = run_episode(&cfg);
        let b = run_episode(&cfg);
        assert_eq!(
            a.metrics.determinism_key(),
            b.metrics.determinism_key(),
            "metrics must be bit-identical"
        );
        let (la, lb) = (a.log.unwrap(), b.log.unwrap());
        assert_eq!(la.steps.len(), lb.steps.len());
        for (x, y) in la.steps.iter().zip(lb.steps.iter()) {
            assert_eq!(x.ego, y.ego);
            assert_eq!(x.pedestrians, y.pedestrians);
        }
    }

    #[test]
    fn log_round_trip_preserves_structure() {
        let mut cfg = base_config();
        cfg.planner = PlannerKind::Tmpcpp;
        cfg.n_pedestrians = 1;
        cfg.time_limit = 3.0;
        cfg.record_log = true;
        let result = run_episode(&cfg);
        let log = result.log.unwrap();
        let text = log.to_jsonl();
        let parsed = EpisodeLog::from_jsonl(&text).unwrap();
        assert_eq!(parsed.steps.len(), log.steps.len());
        assert_eq!(parsed.cycles.len(), log.cycles.len());
        assert!(parsed.meta.is_some());

        // Malformed line reports its number.
        let broken = format!("{}\nnot json\n", text.lines().next().unwrap());
        match EpisodeLog::from_jsonl(&broken) {
            Err(Error::Parse { line, .. }) => assert_eq!(line, 2),
            other => panic!("expected parse error, got {other:?}"),
        }
    }

    #[test]
    fn kinematic_plant_speed_stays_bounded() {
        let mut cfg = base_config();
        cfg.planner = PlannerKind::Tmpcpp;
        cfg.n_pedestrians = 2;
        cfg.seed = 3;
        cfg.time_limit = 10.0;
        cfg.record_log = true;
        let result = run_episode(&cfg);
        let log = result.log.unwrap();
        let v_max = cfg.tmpc.bicycle.v_max;
        for step in &log.steps {
            assert!(step.ego.3 >= -1e-9 && step.ego.3 <= v_max + 1e-9);
        }
    }
}

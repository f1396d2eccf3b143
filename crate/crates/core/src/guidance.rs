//! Space-time visibility PRM: samples guard/connector nodes in (x, y, t),
//! keeps connectors only when they open a new passing topology or merge
//! components, and extracts up to P smoothed guidance trajectories in
//! distinct topology classes. The graph can be propagated across planning
//! cycles so existing strategies persist.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand::SeedableRng;
use serde::{Deserialize, Serialize};

use crate::path::ReferencePath;
use crate::prediction::GaussianPrediction;
use crate::spline::CubicSpline;
use crate::topology::{passing_signature, TopologySignature};
use crate::trajopt::VehicleState;
use crate::Vec2;

/// Node role in the visibility roadmap.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum NodeKind {
    Guard,
    Connector,
    Start,
    Goal,
}

/// Roadmap node in planar position and time.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct SpaceTimeNode {
    pub position: Vec2,
    /// [s]
    pub t: f64,
    pub kind: NodeKind,
    /// Survived from a previous cycle's graph.
    pub propagated: bool,
}

/// Sampling and visibility parameters.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct GuidanceParams {
    /// Planning horizon [s].
    pub t_horizon: f64,
    /// Speed bound used for reachability and edge feasibility [m/s].
    pub v_max: f64,
    /// Lateral corridor half-width around the reference path [m].
    pub half_width: f64,
    /// Sample budget per cycle.
    pub n_samples: usize,
    /// Maximum number of guidance trajectories returned.
    pub p_max: usize,
    /// Passing-label threshold [revolutions].
    pub theta_pass: f64,
    /// Ego body radius used by the coarse collision filter [m].
    pub r_ego: f64,
    /// Extra clearance beyond the combined radii [m].
    pub margin: f64,
    /// Number of goal nodes spread along the path at the horizon.
    pub goal_count: usize,
    /// Spacing between goal nodes [m].
    pub goal_spacing: f64,
    /// Reference speed used to place the goal set [m/s].
    pub v_ref: f64,
    /// Time scale for space-time edge lengths [m/s].
    pub time_scale: f64,
    /// Interpolation checks per edge.
    pub visibility_checks: usize,
}

impl Default for GuidanceParams {
    fn default() -> Self {
        Self {
            t_horizon: 7.0,
            v_max: 5.0,
            half_width: 4.0,
            n_samples: 300,
            p_max: 4,
            theta_pass: 0.25,
            r_ego: 1.0,
            margin: 0.1,
            goal_count: 5,
            goal_spacing: 2.0,
            v_ref: 2.0,
            time_scale: 1.0,
            visibility_checks: 10,
        }
    }
}

/// Undirected space-time roadmap; edges are traversed forward in time.
#[derive(Debug, Clone, Default)]
pub struct GuidanceGraph {
    pub nodes: Vec<SpaceTimeNode>,
    /// Adjacency lists (symmetric).
    pub edges: Vec<Vec<usize>>,
    /// Indices of goal nodes.
    pub goals: Vec<usize>,
    /// Index of the start node.
    pub start: usize,
}

impl GuidanceGraph {
    fn add_node(&mut self, node: SpaceTimeNode) -> usize {
        self.nodes.push(node);
        self.edges.push(Vec::new());
        self.nodes.len() - 1
    }

    fn add_edge(&mut self, a: usize, b: usize) {
        if !self.edges[a].contains(&b) {
            self.edges[a].push(b);
            self.edges[b].push(a);
        }
    }

    pub fn n_nodes(&self) -> usize {
        self.nodes.len()
    }
}

/// Smoothed guidance trajectory: cubic splines over time through the
/// extracted space-time nodes.
#[derive(Debug, Clone)]
pub struct GuidanceTrajectory {
    x: CubicSpline,
    y: CubicSpline,
    /// Space-time polyline the splines interpolate.
    pub nodes: Vec<SpaceTimeNode>,
    pub signature: TopologySignature,
    pub source: TrajectorySource,
    /// Space-time length of the underlying polyline [m].
    pub length: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum TrajectorySource {
    Fresh,
    Propagated,
}

impl GuidanceTrajectory {
    pub fn position_at(&self, t: f64) -> Vec2 {
        Vec2::new(self.x.value(t), self.y.value(t))
    }

    pub fn velocity_at(&self, t: f64) -> Vec2 {
        Vec2::new(self.x.derivative(t), self.y.derivative(t))
    }

    /// Sample at the planner grid `0, dt, .., n*dt`.
    pub fn sample(&self, dt: f64, n: usize) -> Vec<Vec2> {
        (0..=n).map(|k| self.position_at(k as f64 * dt)).collect()
    }
}

/// Uniform space-time sample: `t in (0, T]`, a longitudinal offset within
/// the reachable cone, and a lateral offset within the corridor. The
/// spatial part is rejection-resampled (keeping `t`) until reachable; after
/// 100 failures `t` is re-drawn biased upward so the reachable ball grows.
pub fn sample_spacetime(
    ego: &VehicleState,
    path: &ReferencePath,
    params: &GuidanceParams,
    rng: &mut ChaCha8Rng,
) -> SpaceTimeNode {
    let s_ego = path.project(ego.position(), ego.progress).s;
    let mut t: f64 = rng.gen_range(0.0..params.t_horizon);
    if t == 0.0 {
        t = params.t_horizon;
    }
    loop {
        for _ in 0..100 {
            let ds = rng.gen_range(0.0..(params.v_max * t));
            let lateral = rng.gen_range(-params.half_width..params.half_width);
            let frame = path
                .frame(s_ego + ds)
                .expect("finite sample parameter");
            let position = frame.position + frame.normal * lateral;
            if (position - ego.position()).norm() <= params.v_max * t {
                return SpaceTimeNode {
                    position,
                    t,
                    kind: NodeKind::Guard,
                    propagated: false,
                };
            }
        }
        // Widen the time so that more of the corridor becomes reachable.
        t = rng.gen_range((t.max(params.t_horizon / 2.0))..=params.t_horizon);
    }
}

/// Straight space-time segment feasibility: the implied speed respects the
/// bound and interpolated points keep clear of every obstacle mean.
pub fn visible(
    a: &SpaceTimeNode,
    b: &SpaceTimeNode,
    predictions: &[GaussianPrediction],
    params: &GuidanceParams,
) -> bool {
    let dt = b.t - a.t;
    if dt.abs() < 1e-9 {
        return false;
    }
    let dist = (b.position - a.position).norm();
    if dist / dt.abs() > params.v_max + 1e-9 {
        return false;
    }
    let checks = params.visibility_checks.max(2);
    for i in 0..=checks {
        let alpha = i as f64 / checks as f64;
        let t = a.t + alpha * dt;
        let p = a.position + (b.position - a.position) * alpha;
        for pred in predictions {
            let clearance = pred.radius + params.r_ego + params.margin;
            if (p - prediction_mean_at(pred, t)).norm() < clearance {
                return false;
            }
        }
    }
    true
}

/// Linear interpolation of prediction means at continuous time.
fn prediction_mean_at(pred: &GaussianPrediction, t: f64) -> Vec2 {
    let dt = pred.dt();
    let idx = (t / dt).floor();
    let k = (idx as usize).min(pred.means.len() - 1);
    let k1 = (k + 1).min(pred.means.len() - 1);
    let alpha = (t / dt - idx).clamp(0.0, 1.0);
    pred.means[k] + (pred.means[k1] - pred.means[k]) * alpha
}

fn edge_length(a: &SpaceTimeNode, b: &SpaceTimeNode, time_scale: f64) -> f64 {
    let dp = b.position - a.position;
    let dt = (b.t - a.t) * time_scale;
    (dp.norm_squared() + dt * dt).sqrt()
}

/// Time-monotone shortest path distances from `source` (forward when
/// `forward`, backward otherwise). Returns (distance, predecessor).
fn dijkstra(
    graph: &GuidanceGraph,
    source: usize,
    forward: bool,
    time_scale: f64,
) -> (Vec<f64>, Vec<usize>) {
    let n = graph.nodes.len();
    let mut dist = vec![f64::INFINITY; n];
    let mut prev = vec![usize::MAX; n];
    let mut done = vec![false; n];
    dist[source] = 0.0;
    // Small graphs: linear scan extraction is fine and deterministic.
    loop {
        let mut best = usize::MAX;
        let mut best_d = f64::INFINITY;
        for i in 0..n {
            if !done[i] && dist[i] < best_d {
                best_d = dist[i];
                best = i;
            }
        }
        if best == usize::MAX {
            break;
        }
        done[best] = true;
        for &nb in &graph.edges[best] {
            let ok = if forward {
                graph.nodes[nb].t > graph.nodes[best].t
            } else {
                graph.nodes[nb].t < graph.nodes[best].t
            };
            if !ok {
                continue;
            }
            let w = edge_length(&graph.nodes[best], &graph.nodes[nb], time_scale);
            let cand = dist[best] + w;
            if cand < dist[nb] - 1e-12 || (cand < dist[nb] + 1e-12 && nb < prev.len() && best < prev[nb])
            {
                dist[nb] = cand.min(dist[nb]);
                if cand <= dist[nb] {
                    dist[nb] = cand;
                    prev[nb] = best;
                }
            }
        }
    }
    (dist, prev)
}

/// Ego trajectory samples along a node path (piecewise-linear in space-time)
/// at the prediction grid, used for signature computation.
fn path_samples(
    graph: &GuidanceGraph,
    node_path: &[usize],
    dt: f64,
    n: usize,
) -> Vec<Vec2> {
    let mut out = Vec::with_capacity(n + 1);
    for k in 0..=n {
        let t = k as f64 * dt;
        // Find the segment containing t.
        let mut pos = graph.nodes[*node_path.last().unwrap()].position;
        for w in node_path.windows(2) {
            let (a, b) = (&graph.nodes[w[0]], &graph.nodes[w[1]]);
            if t <= b.t || (w[1] == *node_path.last().unwrap()) {
                let span = (b.t - a.t).max(1e-9);
                let alpha = ((t - a.t) / span).clamp(0.0, 1.0);
                pos = a.position + (b.position - a.position) * alpha;
                break;
            }
        }
        out.push(pos);
    }
    out
}

fn reconstruct(prev: &[usize], from: usize, to: usize) -> Option<Vec<usize>> {
    let mut path = vec![to];
    let mut cur = to;
    while cur != from {
        cur = prev[cur];
        if cur == usize::MAX {
            return None;
        }
        path.push(cur);
    }
    path.reverse();
    Some(path)
}

/// Signature of the shortest start-goal path through `via`, if one exists.
fn signature_through(
    graph: &GuidanceGraph,
    via: usize,
    fwd: &(Vec<f64>, Vec<usize>),
    bwd_all: &[(usize, (Vec<f64>, Vec<usize>))],
    predictions: &[GaussianPrediction],
    dt: f64,
    n: usize,
    theta_pass: f64,
) -> Option<(TopologySignature, f64, Vec<usize>)> {
    let d_start = fwd.0[via];
    if !d_start.is_finite() {
        return None;
    }
    let (goal, bwd) = bwd_all
        .iter()
        .map(|(g, b)| (*g, b))
        .filter(|(_, b)| b.0[via].is_finite())
        .min_by(|a, b| a.1 .0[via].partial_cmp(&b.1 .0[via]).unwrap())?;
    let mut nodes = reconstruct(&fwd.1, graph.start, via)?;
    let tail = reconstruct(&bwd.1, goal, via)?;
    // tail runs goal -> via; reverse to via -> goal, skip the repeated via.
    for &node in tail.iter().rev().skip(1) {
        nodes.push(node);
    }
    let samples = path_samples(graph, &nodes, dt, n);
    let sig = passing_signature(&samples, predictions, theta_pass).ok()?;
    Some((sig, d_start + bwd.0[via], nodes))
}

/// Build (or extend) the visibility roadmap. Sampling stops once `p_max`
/// distinct-signature start-goal paths exist or the budget is exhausted.
#[allow(clippy::too_many_arguments)]
pub fn build_prm(
    ego: &VehicleState,
    path: &ReferencePath,
    predictions: &[GaussianPrediction],
    prev_graph: Option<GuidanceGraph>,
    params: &GuidanceParams,
    plan_dt: f64,
    plan_steps: usize,
    seed: u64,
) -> GuidanceGraph {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut graph = prev_graph.unwrap_or_default();

    if graph.nodes.is_empty() {
        // Fresh graph: start plus the goal set on the path at the horizon.
        let start = graph.add_node(SpaceTimeNode {
            position: ego.position(),
            t: 0.0,
            kind: NodeKind::Start,
            propagated: false,
        });
        graph.start = start;
        let s_ego = path.project(ego.position(), ego.progress).s;
        let center = s_ego + params.v_ref * params.t_horizon;
        let half = (params.goal_count.saturating_sub(1)) as f64 / 2.0;
        for i in 0..params.goal_count {
            let s_goal = center + (i as f64 - half) * params.goal_spacing;
            let frame = path.frame(s_goal).expect("finite goal parameter");
            let goal = graph.add_node(SpaceTimeNode {
                position: frame.position,
                t: params.t_horizon,
                kind: NodeKind::Goal,
                propagated: false,
            });
            graph.goals.push(goal);
        }
    }

    // Direct start-goal edges.
    for &g in &graph.goals.clone() {
        if visible(&graph.nodes[graph.start], &graph.nodes[g], predictions, params) {
            graph.add_edge(graph.start, g);
        }
    }

    let mut known_signatures: Vec<TopologySignature> = Vec::new();
    let refresh_signatures = |graph: &GuidanceGraph,
                              known: &mut Vec<TopologySignature>|
     -> usize {
        let fwd = dijkstra(graph, graph.start, true, params.time_scale);
        let bwd: Vec<(usize, (Vec<f64>, Vec<usize>))> = graph
            .goals
            .iter()
            .map(|&g| (g, dijkstra(graph, g, false, params.time_scale)))
            .collect();
        known.clear();
        for via in 0..graph.nodes.len() {
            if let Some((sig, _, _)) = signature_through(
                graph,
                via,
                &fwd,
                &bwd,
                predictions,
                plan_dt,
                plan_steps,
                params.theta_pass,
            ) {
                if !known.iter().any(|k| k == &sig) {
                    known.push(sig);
                }
            }
        }
        known.len()
    };
    let mut distinct_paths = refresh_signatures(&graph, &mut known_signatures);

    let mut sampled = 0usize;
    while sampled < params.n_samples && distinct_paths < params.p_max {
        sampled += 1;
        let node = sample_spacetime(ego, path, params, &mut rng);

        // Guards visible from the candidate, in deterministic index order.
        let guard_like = |k: NodeKind| {
            matches!(k, NodeKind::Guard | NodeKind::Start | NodeKind::Goal)
        };
        let visible_guards: Vec<usize> = (0..graph.nodes.len())
            .filter(|&i| guard_like(graph.nodes[i].kind))
            .filter(|&i| visible(&graph.nodes[i], &node, predictions, params))
            .collect();

        match visible_guards.len() {
            0 => {
                graph.add_node(SpaceTimeNode {
                    kind: NodeKind::Guard,
                    ..node
                });
            }
            1 => {} // Redundant with the guard's visibility region.
            _ => {
                // Candidate connector: accept if it merges components or
                // opens a start-goal path with a new signature.
                let mut comp = components(&graph);
                let first_comp = comp[visible_guards[0]];
                let merges = visible_guards.iter().any(|&g| comp[g] != first_comp);

                let idx = graph.add_node(SpaceTimeNode {
                    kind: NodeKind::Connector,
                    ..node
                });
                for &g in &visible_guards {
                    graph.add_edge(idx, g);
                }
                if merges {
                    distinct_paths = refresh_signatures(&graph, &mut known_signatures);
                    continue;
                }
                // Same component: does the path through this node add a new
                // signature?
                let fwd = dijkstra(&graph, graph.start, true, params.time_scale);
                let bwd: Vec<(usize, (Vec<f64>, Vec<usize>))> = graph
                    .goals
                    .iter()
                    .map(|&g| (g, dijkstra(&graph, g, false, params.time_scale)))
                    .collect();
                let new_sig = signature_through(
                    &graph,
                    idx,
                    &fwd,
                    &bwd,
                    predictions,
                    plan_dt,
                    plan_steps,
                    params.theta_pass,
                )
                .map(|(sig, _, _)| sig);
                let keep = match new_sig {
                    Some(sig) => {
                        if known_signatures.iter().any(|k| k == &sig) {
                            false
                        } else {
                            known_signatures.push(sig);
                            distinct_paths += 1;
                            true
                        }
                    }
                    None => false,
                };
                if !keep {
                    // Roll the node back (it is the last one added).
                    for &g in &visible_guards {
                        graph.edges[g].retain(|&e| e != idx);
                    }
                    graph.nodes.pop();
                    graph.edges.pop();
                }
                comp.clear();
            }
        }
    }
    graph
}

/// Connected components over the undirected edge set.
fn components(graph: &GuidanceGraph) -> Vec<usize> {
    let n = graph.nodes.len();
    let mut comp = vec![usize::MAX; n];
    let mut next = 0;
    for i in 0..n {
        if comp[i] != usize::MAX {
            continue;
        }
        let mut stack = vec![i];
        comp[i] = next;
        while let Some(v) = stack.pop() {
            for &nb in &graph.edges[v] {
                if comp[nb] == usize::MAX {
                    comp[nb] = next;
                    stack.push(nb);
                }
            }
        }
        next += 1;
    }
    comp
}

/// Extract at most `p_max` start-goal trajectories with pairwise distinct
/// signatures, shortest first, each smoothed by cubic splines over time.
pub fn extract_paths(
    graph: &GuidanceGraph,
    predictions: &[GaussianPrediction],
    params: &GuidanceParams,
    plan_dt: f64,
    plan_steps: usize,
) -> Vec<GuidanceTrajectory> {
    if graph.nodes.is_empty() {
        return Vec::new();
    }
    let fwd = dijkstra(graph, graph.start, true, params.time_scale);
    let bwd: Vec<(usize, (Vec<f64>, Vec<usize>))> = graph
        .goals
        .iter()
        .map(|&g| (g, dijkstra(graph, g, false, params.time_scale)))
        .collect();

    // Candidate paths: the shortest start-goal path through every node.
    let mut best: Vec<(TopologySignature, f64, Vec<usize>)> = Vec::new();
    for via in 0..graph.nodes.len() {
        if let Some((sig, len, nodes)) = signature_through(
            graph,
            via,
            &fwd,
            &bwd,
            predictions,
            plan_dt,
            plan_steps,
            params.theta_pass,
        ) {
            match best.iter_mut().find(|(s, _, _)| s == &sig) {
                Some(entry) => {
                    if len < entry.1 - 1e-12 {
                        entry.1 = len;
                        entry.2 = nodes;
                    }
                }
                None => best.push((sig, len, nodes)),
            }
        }
    }
    best.sort_by(|a, b| a.1.partial_cmp(&b.1).unwrap());
    best.truncate(params.p_max);

    best.into_iter()
        .filter_map(|(signature, length, node_idx)| {
            let nodes: Vec<SpaceTimeNode> =
                node_idx.iter().map(|&i| graph.nodes[i]).collect();
            let ts: Vec<f64> = nodes.iter().map(|n| n.t).collect();
            let xs: Vec<f64> = nodes.iter().map(|n| n.position.x).collect();
            let ys: Vec<f64> = nodes.iter().map(|n| n.position.y).collect();
            let x = CubicSpline::natural(&ts, &xs).ok()?;
            let y = CubicSpline::natural(&ts, &ys).ok()?;
            let source = if nodes
                .iter()
                .any(|n| n.propagated && n.kind == NodeKind::Connector)
            {
                TrajectorySource::Propagated
            } else {
                TrajectorySource::Fresh
            };
            Some(GuidanceTrajectory {
                x,
                y,
                nodes,
                signature,
                source,
                length,
            })
        })
        .collect()
}

/// Shift the graph one replanning period into the past: node times drop by
/// `dt`, expired nodes vanish, edges are re-validated against the new
/// predictions, and the start is replaced by the new ego state.
pub fn propagate_graph(
    graph: &GuidanceGraph,
    dt: f64,
    new_ego: &VehicleState,
    new_predictions: &[GaussianPrediction],
    params: &GuidanceParams,
) -> GuidanceGraph {
    let mut out = GuidanceGraph::default();
    let mut remap = vec![usize::MAX; graph.nodes.len()];

    let start = out.add_node(SpaceTimeNode {
        position: new_ego.position(),
        t: 0.0,
        kind: NodeKind::Start,
        propagated: false,
    });
    out.start = start;

    for (i, node) in graph.nodes.iter().enumerate() {
        if node.kind == NodeKind::Start {
            remap[i] = start;
            continue;
        }
        // Goal nodes stay pinned at the horizon; everything else shifts
        // into the past and expires at zero.
        let t = if node.kind == NodeKind::Goal {
            params.t_horizon
        } else {
            let t = node.t - dt;
            if t <= 0.0 {
                continue;
            }
            t
        };
        let idx = out.add_node(SpaceTimeNode {
            position: node.position,
            t,
            kind: node.kind,
            propagated: true,
        });
        remap[i] = idx;
        if node.kind == NodeKind::Goal {
            out.goals.push(idx);
        }
    }

    for (i, adj) in graph.edges.iter().enumerate() {
        if remap[i] == usize::MAX {
            continue;
        }
        for &j in adj {
            if j < i || remap[j] == usize::MAX {
                continue;
            }
            let (a, b) = (&out.nodes[remap[i]], &out.nodes[remap[j]]);
            if visible(a, b, new_predictions, params) {
                out.add_edge(remap[i], remap[j]);
            }
        }
    }

    // Reconnect the new start to visible guards and connectors.
    for i in 1..out.nodes.len() {
        if visible(&out.nodes[start], &out.nodes[i], new_predictions, params) {
            match out.nodes[i].kind {
                NodeKind::Connector | NodeKind::Goal => out.add_edge(start, i),
                _ => {}
            }
        }
    }
    out
}

/// Deterministic per-cycle RNG seed from the episode seed and cycle index.
pub fn cycle_seed(episode_seed: u64, cycle: u64) -> u64 {
    episode_seed
        .wrapping_mul(0x9e37_79b9_7f4a_7c15)
        .wrapping_add(cycle.wrapping_mul(0xbf58_476d_1ce4_e5b9))
}

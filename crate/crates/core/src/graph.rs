//! Heterogeneous scene graph construction: lane node sampling, raw node
//! features, and the four edge families with their k-NN and radius rules.

use std::collections::BTreeMap;

use serde::Serialize;

use crate::config::Config;
use crate::error::{Error, Result};
use crate::scenario::{AgentType, LanePolyline, Scenario, TrackCategory};
use crate::tensor::Tensor;

pub const LANE_FEAT_DIM: usize = 13;
pub const STEP_FEAT_DIM: usize = 12;
pub const TRAJ_SEQ_FEAT_DIM: usize = 12;
pub const LANE_EDGE_FEAT_DIM: usize = 4;
pub const STEP_LANE_EDGE_FEAT_DIM: usize = 4;
pub const STEP_STEP_EDGE_FEAT_DIM: usize = 5;
pub const TRAJ_EDGE_FEAT_DIM: usize = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum NodeType {
    Lane,
    TrajectoryStep,
    FullTrajectory,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Relation {
    LaneLeft,
    LaneRight,
    LanePred,
    LaneSucc,
    LaneToStep,
    StepToLane,
    StepToStep,
    StepToTraj,
    TrajToStep,
}

impl Relation {
    pub const ALL: [Relation; 9] = [
        Relation::LaneLeft,
        Relation::LaneRight,
        Relation::LanePred,
        Relation::LaneSucc,
        Relation::LaneToStep,
        Relation::StepToLane,
        Relation::StepToStep,
        Relation::StepToTraj,
        Relation::TrajToStep,
    ];

    pub const LANE_RELATIONS: [Relation; 4] =
        [Relation::LaneLeft, Relation::LaneRight, Relation::LanePred, Relation::LaneSucc];

    /// Edge families the ablation study may remove.
    pub const REMOVABLE: [Relation; 4] = [
        Relation::LaneToStep,
        Relation::StepToLane,
        Relation::StepToStep,
        Relation::TrajToStep,
    ];

    pub fn name(&self) -> &'static str {
        match self {
            Relation::LaneLeft => "lane_left",
            Relation::LaneRight => "lane_right",
            Relation::LanePred => "lane_pred",
            Relation::LaneSucc => "lane_succ",
            Relation::LaneToStep => "lane_to_step",
            Relation::StepToLane => "step_to_lane",
            Relation::StepToStep => "step_to_step",
            Relation::StepToTraj => "step_to_traj",
            Relation::TrajToStep => "traj_to_step",
        }
    }

    pub fn parse(s: &str) -> Option<Relation> {
        Relation::ALL.iter().copied().find(|r| r.name() == s)
    }

    /// (source, target) node types.
    pub fn endpoints(&self) -> (NodeType, NodeType) {
        use NodeType::*;
        match self {
            Relation::LaneLeft | Relation::LaneRight | Relation::LanePred | Relation::LaneSucc => {
                (Lane, Lane)
            }
            Relation::LaneToStep => (Lane, TrajectoryStep),
            Relation::StepToLane => (TrajectoryStep, Lane),
            Relation::StepToStep => (TrajectoryStep, TrajectoryStep),
            Relation::StepToTraj => (TrajectoryStep, FullTrajectory),
            Relation::TrajToStep => (FullTrajectory, TrajectoryStep),
        }
    }

    pub fn edge_feat_dim(&self) -> usize {
        match self {
            Relation::LaneLeft | Relation::LaneRight | Relation::LanePred | Relation::LaneSucc => {
                LANE_EDGE_FEAT_DIM
            }
            Relation::LaneToStep | Relation::StepToLane => STEP_LANE_EDGE_FEAT_DIM,
            Relation::StepToStep => STEP_STEP_EDGE_FEAT_DIM,
            Relation::StepToTraj | Relation::TrajToStep => TRAJ_EDGE_FEAT_DIM,
        }
    }
}

/// Normalization frame: the focal agent's last observed pose.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct Frame {
    pub origin: [f64; 2],
    pub rotation: f64,
}

impl Frame {
    pub fn to_frame(&self, p: [f64; 2]) -> [f64; 2] {
        let dx = p[0] - self.origin[0];
        let dy = p[1] - self.origin[1];
        let (s, c) = self.rotation.sin_cos();
        [c * dx + s * dy, -s * dx + c * dy]
    }

    pub fn from_frame(&self, p: [f64; 2]) -> [f64; 2] {
        let (s, c) = self.rotation.sin_cos();
        [self.origin[0] + c * p[0] - s * p[1], self.origin[1] + s * p[0] + c * p[1]]
    }

    pub fn rotate_to_frame(&self, v: [f64; 2]) -> [f64; 2] {
        let (s, c) = self.rotation.sin_cos();
        [c * v[0] + s * v[1], -s * v[0] + c * v[1]]
    }

    pub fn heading_to_frame(&self, h: f64) -> f64 {
        wrap_angle(h - self.rotation)
    }
}

pub fn wrap_angle(a: f64) -> f64 {
    let mut a = a;
    while a > std::f64::consts::PI {
        a -= 2.0 * std::f64::consts::PI;
    }
    while a < -std::f64::consts::PI {
        a += 2.0 * std::f64::consts::PI;
    }
    a
}

/// One node table: raw features plus the geometry the builders and the
/// refinement module need (coordinates, headings, timesteps, owners).
#[derive(Debug, Clone)]
pub struct NodeTable {
    pub node_type: NodeType,
    pub features: Tensor,
    /// Frame-relative coordinates; absent for full-trajectory nodes.
    pub coords: Option<Vec<[f64; 2]>>,
    /// Frame-relative heading per node (lane direction / agent heading).
    pub heading: Option<Vec<f64>>,
    /// Timestep index (trajectory-step nodes only).
    pub timestep: Option<Vec<usize>>,
    /// Owning agent index (trajectory nodes only).
    pub owner: Option<Vec<usize>>,
    /// Owning lane id per node (lane nodes only).
    pub lane_of: Option<Vec<u64>>,
}

impl NodeTable {
    pub fn count(&self) -> usize {
        self.features.rows()
    }
}

#[derive(Debug, Clone)]
pub struct EdgeTable {
    pub relation: Relation,
    pub src: Vec<usize>,
    pub dst: Vec<usize>,
    pub features: Tensor,
}

impl EdgeTable {
    pub fn empty(relation: Relation) -> Self {
        EdgeTable {
            relation,
            src: vec![],
            dst: vec![],
            features: Tensor::zeros(vec![0, relation.edge_feat_dim()]),
        }
    }

    pub fn len(&self) -> usize {
        self.src.len()
    }

    pub fn is_empty(&self) -> bool {
        self.src.is_empty()
    }
}

/// Per-agent metadata carried alongside the graph.
#[derive(Debug, Clone)]
pub struct AgentMeta {
    pub track_id: u64,
    pub agent_type: AgentType,
    pub category: TrackCategory,
    /// Frame-relative last observed position.
    pub last_obs_pos: [f64; 2],
}

#[derive(Debug, Clone)]
pub struct HeteroGraph {
    pub scenario_id: String,
    pub frame: Frame,
    pub lanes: NodeTable,
    pub steps: NodeTable,
    pub trajs: NodeTable,
    pub edges: BTreeMap<Relation, EdgeTable>,
    pub agents: Vec<AgentMeta>,
    /// Per-agent observed sequence features [T_obs × TRAJ_SEQ_FEAT_DIM].
    pub obs_seq: Vec<Tensor>,
    /// Per-agent frame-relative ground-truth future [T_fut × 2].
    pub gt_future: Vec<Tensor>,
    pub t_obs: usize,
    pub t_fut: usize,
    pub dt_s: f64,
}

impl HeteroGraph {
    pub fn edge(&self, r: Relation) -> &EdgeTable {
        &self.edges[&r]
    }

    pub fn n_agents(&self) -> usize {
        self.agents.len()
    }

    /// Step node index for (agent, timestep); steps are laid out densely.
    pub fn step_index(&self, agent: usize, t: usize) -> usize {
        agent * self.t_obs + t
    }

    /// Debug dump of node tables (with coordinates) and edge lists.
    pub fn to_debug_json(&self) -> serde_json::Value {
        let nodes = |nt: &NodeTable| {
            serde_json::json!({
                "count": nt.count(),
                "coords": nt.coords,
            })
        };
        let edges: BTreeMap<&str, serde_json::Value> = self
            .edges
            .iter()
            .map(|(r, e)| {
                (r.name(), serde_json::json!({ "src": e.src, "dst": e.dst }))
            })
            .collect();
        serde_json::json!({
            "scenario_id": self.scenario_id,
            "frame": self.frame,
            "lane_nodes": nodes(&self.lanes),
            "step_nodes": nodes(&self.steps),
            "traj_nodes": nodes(&self.trajs),
            "edges": edges,
        })
    }
}

fn dist(a: [f64; 2], b: [f64; 2]) -> f64 {
    ((a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2)).sqrt()
}

/// Select up to `k` nearest candidates within `radius`, ties broken by the
/// smaller candidate index. Candidates are (index, distance) pairs.
fn knn_select(mut candidates: Vec<(usize, f64)>, k: usize, radius: f64) -> Vec<usize> {
    candidates.retain(|&(_, d)| d <= radius);
    candidates.sort_by(|a, b| a.1.partial_cmp(&b.1).unwrap().then(a.0.cmp(&b.0)));
    candidates.truncate(k);
    candidates.into_iter().map(|(i, _)| i).collect()
}

/// Relative edge feature: displacement in the target's heading-aligned local
/// frame plus relative heading (sin, cos).
fn rel_feature(src_pos: [f64; 2], src_heading: f64, tgt_pos: [f64; 2], tgt_heading: f64) -> [f64; 4] {
    let dx = src_pos[0] - tgt_pos[0];
    let dy = src_pos[1] - tgt_pos[1];
    let (s, c) = tgt_heading.sin_cos();
    let local = [c * dx + s * dy, -s * dx + c * dy];
    let dh = wrap_angle(src_heading - tgt_heading);
    [local[0], local[1], dh.sin(), dh.cos()]
}

/// Sample lane nodes at arc-length intervals ≤ spacing, endpoints included.
pub fn sample_lane_nodes(lanes: &[LanePolyline], spacing: f64, frame: &Frame) -> Result<NodeTable> {
    assert!(spacing > 0.0, "spacing must be positive");
    let mut feats: Vec<Vec<f64>> = Vec::new();
    let mut coords = Vec::new();
    let mut headings = Vec::new();
    let mut lane_of = Vec::new();
    for lane in lanes {
        let distinct = lane
            .centerline
            .windows(2)
            .any(|w| w[0] != w[1]);
        if lane.centerline.len() < 2 || !distinct {
            return Err(Error::Graph(format!("degenerate lane {}", lane.id)));
        }
        let len = lane.length();
        // tolerance keeps the node count stable when the length is a near-exact
        // multiple of the spacing (e.g. after a rigid transform of the scene)
        let n_seg = (len / spacing - 1e-9).ceil().max(1.0) as usize;
        for i in 0..=n_seg {
            let s = len * i as f64 / n_seg as f64;
            let p_world = lane.point_at(s);
            // central difference over a window: segment tangents jump at the
            // polyline vertices where sampled nodes tend to land exactly
            let h = (spacing * 0.25).min(len * 0.25);
            let ahead = lane.point_at((s + h).min(len));
            let behind = lane.point_at((s - h).max(0.0));
            let tan = [ahead[0] - behind[0], ahead[1] - behind[1]];
            let p = frame.to_frame(p_world);
            let dir_angle = frame.heading_to_frame(tan[1].atan2(tan[0]));
            // nearest original vertex supplies marking distances
            let vi = nearest_vertex(lane, p_world);
            let lm = lane.left_mark.one_hot();
            let rm = lane.right_mark.one_hot();
            let mut f = vec![
                p[0],
                p[1],
                dir_angle.cos(),
                dir_angle.sin(),
                lane.left_dist[vi],
                lane.right_dist[vi],
            ];
            f.extend_from_slice(&lm);
            f.extend_from_slice(&rm);
            f.push(if lane.is_intersection { 1.0 } else { 0.0 });
            debug_assert_eq!(f.len(), LANE_FEAT_DIM);
            feats.push(f);
            coords.push(p);
            headings.push(dir_angle);
            lane_of.push(lane.id);
        }
    }
    Ok(NodeTable {
        node_type: NodeType::Lane,
        features: Tensor::from_rows(&feats),
        coords: Some(coords),
        heading: Some(headings),
        timestep: None,
        owner: None,
        lane_of: Some(lane_of),
    })
}

fn nearest_vertex(lane: &LanePolyline, p: [f64; 2]) -> usize {
    let mut best = 0;
    let mut best_d = f64::INFINITY;
    for (i, v) in lane.centerline.iter().enumerate() {
        let d = dist(*v, p);
        if d < best_d {
            best_d = d;
            best = i;
        }
    }
    best
}

/// Lane/lane adjacency: pred/succ chains (bridging connectivity boundaries)
/// and left/right links to the nearest node on the neighbor lane.
pub fn build_lane_edges(lane_nodes: &NodeTable, lanes: &[LanePolyline]) -> BTreeMap<Relation, EdgeTable> {
    let coords = lane_nodes.coords.as_ref().unwrap();
    let headings = lane_nodes.heading.as_ref().unwrap();
    let lane_of = lane_nodes.lane_of.as_ref().unwrap();
    // node index ranges per lane id (nodes are appended lane by lane)
    let mut ranges: BTreeMap<u64, (usize, usize)> = BTreeMap::new();
    for (i, &lid) in lane_of.iter().enumerate() {
        let e = ranges.entry(lid).or_insert((i, i));
        e.1 = i;
    }
    // chains within each lane plus bridges across declared connectivity;
    // successor and predecessor declarations may overlap, so dedupe pairs
    let mut succ_pairs: std::collections::BTreeSet<(usize, usize)> = Default::default();
    for lane in lanes {
        let (lo, hi) = ranges[&lane.id];
        for i in lo..hi {
            succ_pairs.insert((i, i + 1));
        }
        for s in &lane.successors {
            if let Some(&(slo, _)) = ranges.get(s) {
                succ_pairs.insert((hi, slo));
            }
        }
        for p in &lane.predecessors {
            if let Some(&(_, phi)) = ranges.get(p) {
                succ_pairs.insert((phi, lo));
            }
        }
    }
    // under lane_succ the target aggregates from its successor (source is the
    // downstream node); lane_pred is the mirror image
    let mut succ = (Vec::new(), Vec::new());
    let mut pred = (Vec::new(), Vec::new());
    for &(a, b) in &succ_pairs {
        succ.0.push(b);
        succ.1.push(a);
        pred.0.push(a);
        pred.1.push(b);
    }
    let mut left = (Vec::new(), Vec::new());
    let mut right = (Vec::new(), Vec::new());
    for lane in lanes {
        let (lo, hi) = ranges[&lane.id];
        for (side, neighbor) in
            [(&mut left, lane.left_neighbor), (&mut right, lane.right_neighbor)]
        {
            let Some(nid) = neighbor else { continue };
            let Some(&(nlo, nhi)) = ranges.get(&nid) else { continue };
            for i in lo..=hi {
                // nearest node on the neighbor lane, ties to the lower index
                let mut best = nlo;
                let mut best_d = f64::INFINITY;
                for j in nlo..=nhi {
                    let d = dist(coords[i], coords[j]);
                    if d < best_d {
                        best_d = d;
                        best = j;
                    }
                }
                side.0.push(best);
                side.1.push(i);
            }
        }
    }
    let mk = |relation: Relation, (src, dst): (Vec<usize>, Vec<usize>)| {
        let feats: Vec<Vec<f64>> = src
            .iter()
            .zip(&dst)
            .map(|(&j, &i)| rel_feature(coords[j], headings[j], coords[i], headings[i]).to_vec())
            .collect();
        EdgeTable {
            relation,
            features: if feats.is_empty() {
                Tensor::zeros(vec![0, LANE_EDGE_FEAT_DIM])
            } else {
                Tensor::from_rows(&feats)
            },
            src,
            dst,
        }
    };
    BTreeMap::from([
        (Relation::LaneSucc, mk(Relation::LaneSucc, succ)),
        (Relation::LanePred, mk(Relation::LanePred, pred)),
        (Relation::LaneLeft, mk(Relation::LaneLeft, left)),
        (Relation::LaneRight, mk(Relation::LaneRight, right)),
    ])
}

/// Orientation gate: vehicle-like agents only connect to lane nodes whose
/// direction is within the gate of the agent heading.
fn orientation_ok(agent_type: AgentType, step_heading: f64, lane_heading: f64, gate_rad: f64) -> bool {
    if !agent_type.is_vehicle_like() {
        return true;
    }
    wrap_angle(step_heading - lane_heading).abs() <= gate_rad
}

/// Step/lane edges in both directions, independently per direction: for each
/// step node the ≤ k nearest lane nodes within the radius (orientation-gated),
/// and for each lane node the ≤ k nearest step nodes under the same rules.
pub fn build_step_lane_edges(
    steps: &NodeTable,
    lanes: &NodeTable,
    agent_types: &[AgentType],
    cfg: &Config,
) -> (EdgeTable, EdgeTable) {
    let (mut l2s, mut s2l) =
        (EdgeTable::empty(Relation::LaneToStep), EdgeTable::empty(Relation::StepToLane));
    if steps.count() == 0 || lanes.count() == 0 {
        return (l2s, s2l);
    }
    let sc = steps.coords.as_ref().unwrap();
    let sh = steps.heading.as_ref().unwrap();
    let owners = steps.owner.as_ref().unwrap();
    let lc = lanes.coords.as_ref().unwrap();
    let lh = lanes.heading.as_ref().unwrap();
    let gate = cfg.orientation_gate_deg.to_radians();

    let mut l2s_feats: Vec<Vec<f64>> = Vec::new();
    for si in 0..steps.count() {
        let at = agent_types[owners[si]];
        let candidates: Vec<(usize, f64)> = (0..lanes.count())
            .filter(|&li| orientation_ok(at, sh[si], lh[li], gate))
            .map(|li| (li, dist(sc[si], lc[li])))
            .collect();
        for li in knn_select(candidates, cfg.knn_k, cfg.step_lane_radius) {
            l2s.src.push(li);
            l2s.dst.push(si);
            l2s_feats.push(rel_feature(lc[li], lh[li], sc[si], sh[si]).to_vec());
        }
    }
    let mut s2l_feats: Vec<Vec<f64>> = Vec::new();
    for li in 0..lanes.count() {
        let candidates: Vec<(usize, f64)> = (0..steps.count())
            .filter(|&si| orientation_ok(agent_types[owners[si]], sh[si], lh[li], gate))
            .map(|si| (si, dist(sc[si], lc[li])))
            .collect();
        for si in knn_select(candidates, cfg.knn_k, cfg.step_lane_radius) {
            s2l.src.push(si);
            s2l.dst.push(li);
            s2l_feats.push(rel_feature(sc[si], sh[si], lc[li], lh[li]).to_vec());
        }
    }
    if !l2s_feats.is_empty() {
        l2s.features = Tensor::from_rows(&l2s_feats);
    }
    if !s2l_feats.is_empty() {
        s2l.features = Tensor::from_rows(&s2l_feats);
    }
    (l2s, s2l)
}

/// Agent/agent interaction: per step node, the ≤ k nearest other agents' step
/// nodes at the same timestep within the (large) radius.
pub fn build_step_step_edges(steps: &NodeTable, speeds: &[f64], cfg: &Config) -> EdgeTable {
    let mut table = EdgeTable::empty(Relation::StepToStep);
    let n = steps.count();
    if n == 0 {
        return table;
    }
    let sc = steps.coords.as_ref().unwrap();
    let sh = steps.heading.as_ref().unwrap();
    let ts = steps.timestep.as_ref().unwrap();
    let owners = steps.owner.as_ref().unwrap();
    let mut feats: Vec<Vec<f64>> = Vec::new();
    for i in 0..n {
        let candidates: Vec<(usize, f64)> = (0..n)
            .filter(|&j| owners[j] != owners[i] && ts[j] == ts[i])
            .map(|j| (j, dist(sc[j], sc[i])))
            .collect();
        for j in knn_select(candidates, cfg.knn_k, cfg.step_step_radius) {
            let mut f = rel_feature(sc[j], sh[j], sc[i], sh[i]).to_vec();
            f.push(speeds[j] - speeds[i]);
            table.src.push(j);
            table.dst.push(i);
            feats.push(f);
        }
    }
    if !feats.is_empty() {
        table.features = Tensor::from_rows(&feats);
    }
    table
}

/// Step ↔ full-trajectory relay edges, complete bipartite within each agent.
pub fn build_trajectory_edges(steps: &NodeTable, n_agents: usize, t_obs: usize) -> Result<(EdgeTable, EdgeTable)> {
    let mut s2t = EdgeTable::empty(Relation::StepToTraj);
    let mut t2s = EdgeTable::empty(Relation::TrajToStep);
    let owners = steps.owner.as_ref().unwrap();
    let ts = steps.timestep.as_ref().unwrap();
    let mut s2t_feats = Vec::new();
    let mut t2s_feats = Vec::new();
    for si in 0..steps.count() {
        let a = owners[si];
        if a >= n_agents {
            return Err(Error::Graph(format!("orphan step node {si}: no trajectory node")));
        }
        let t_norm = ts[si] as f64 / (t_obs.max(2) - 1) as f64;
        s2t.src.push(si);
        s2t.dst.push(a);
        s2t_feats.push(vec![t_norm]);
        t2s.src.push(a);
        t2s.dst.push(si);
        t2s_feats.push(vec![t_norm]);
    }
    if !s2t_feats.is_empty() {
        s2t.features = Tensor::from_rows(&s2t_feats);
        t2s.features = Tensor::from_rows(&t2s_feats);
    }
    Ok((s2t, t2s))
}

/// Build the full heterogeneous graph for a scenario.
pub fn assemble_scene_graph(scenario: &Scenario, cfg: &Config) -> Result<HeteroGraph> {
    scenario.validate()?;
    let t_obs = scenario.t_obs();
    let t_fut = scenario.t_fut();
    let focal = scenario.focal_track();
    let last_obs = &focal.states[t_obs - 1];
    let frame = Frame { origin: [last_obs.x, last_obs.y], rotation: last_obs.heading };

    let lanes = sample_lane_nodes(&scenario.lanes, cfg.lane_spacing, &frame)?;

    // step nodes: observed steps only, densely laid out agent-major
    let mut step_feats: Vec<Vec<f64>> = Vec::new();
    let mut step_coords = Vec::new();
    let mut step_headings = Vec::new();
    let mut step_ts = Vec::new();
    let mut step_owner = Vec::new();
    let mut step_speeds = Vec::new();
    let mut agents = Vec::new();
    let mut obs_seq = Vec::new();
    let mut gt_future = Vec::new();
    for (ai, track) in scenario.tracks.iter().enumerate() {
        let type_onehot = track.agent_type.one_hot();
        let mut seq_rows = Vec::new();
        for (t, state) in track.states.iter().take(t_obs).enumerate() {
            let p = frame.to_frame([state.x, state.y]);
            let v = frame.rotate_to_frame([state.vx, state.vy]);
            let h = frame.heading_to_frame(state.heading);
            let t_norm = t as f64 / (t_obs.max(2) - 1) as f64;
            let mut f = vec![p[0], p[1], state.speed(), h.sin(), h.cos()];
            f.extend_from_slice(&type_onehot);
            f.push(t_norm);
            f.push(1.0);
            debug_assert_eq!(f.len(), STEP_FEAT_DIM);
            step_feats.push(f);
            step_coords.push(p);
            step_headings.push(h);
            step_ts.push(t);
            step_owner.push(ai);
            step_speeds.push(state.speed());
            let mut row = vec![p[0], p[1], v[0], v[1], h.sin(), h.cos()];
            row.extend_from_slice(&type_onehot);
            row.push(t_norm);
            debug_assert_eq!(row.len(), TRAJ_SEQ_FEAT_DIM);
            seq_rows.push(row);
        }
        obs_seq.push(Tensor::from_rows(&seq_rows));
        let gt: Vec<Vec<f64>> = track.states[t_obs..]
            .iter()
            .map(|s| frame.to_frame([s.x, s.y]).to_vec())
            .collect();
        gt_future.push(Tensor::from_rows(&gt));
        let last = &track.states[t_obs - 1];
        agents.push(AgentMeta {
            track_id: track.id,
            agent_type: track.agent_type,
            category: track.category,
            last_obs_pos: frame.to_frame([last.x, last.y]),
        });
    }
    let steps = NodeTable {
        node_type: NodeType::TrajectoryStep,
        features: Tensor::from_rows(&step_feats),
        coords: Some(step_coords),
        heading: Some(step_headings),
        timestep: Some(step_ts),
        owner: Some(step_owner),
        lane_of: None,
    };
    let n_agents = agents.len();
    let trajs = NodeTable {
        node_type: NodeType::FullTrajectory,
        features: Tensor::zeros(vec![n_agents, 0]),
        coords: None,
        heading: None,
        timestep: None,
        owner: Some((0..n_agents).collect()),
        lane_of: None,
    };

    let mut edges = build_lane_edges(&lanes, &scenario.lanes);
    let agent_types: Vec<AgentType> = scenario.tracks.iter().map(|t| t.agent_type).collect();
    let (l2s, s2l) = build_step_lane_edges(&steps, &lanes, &agent_types, cfg);
    edges.insert(Relation::LaneToStep, l2s);
    edges.insert(Relation::StepToLane, s2l);
    edges.insert(Relation::StepToStep, build_step_step_edges(&steps, &step_speeds, cfg));
    let (s2t, t2s) = build_trajectory_edges(&steps, n_agents, t_obs)?;
    edges.insert(Relation::StepToTraj, s2t);
    edges.insert(Relation::TrajToStep, t2s);
    for removed in &cfg.removed_edges {
        edges.insert(*removed, EdgeTable::empty(*removed));
    }

    Ok(HeteroGraph {
        scenario_id: scenario.id.clone(),
        frame,
        lanes,
        steps,
        trajs,
        edges,
        agents,
        obs_seq,
        gt_future,
        t_obs,
        t_fut,
        dt_s: scenario.dt_s,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::generator::{generate_synthetic, ScenarioKind};
    use crate::scenario::timestep_layout;
    use std::collections::BTreeSet;

    fn desk_graph(kind: ScenarioKind, n_agents: usize, seed: u64) -> (Scenario, HeteroGraph) {
        let cfg = Config::desk_test();
        let layout = timestep_layout(cfg.rate_hz).unwrap();
        let sc = generate_synthetic(kind, n_agents, seed, &layout);
        let g = assemble_scene_graph(&sc, &cfg).unwrap();
        (sc, g)
    }

    /// Brute-force reference: all (candidate, dist) pairs sorted by distance
    /// then index, truncated.
    fn brute_knn(
        targets: &[[f64; 2]],
        sources: &[[f64; 2]],
        admissible: impl Fn(usize, usize) -> bool,
        k: usize,
        radius: f64,
    ) -> Vec<Vec<usize>> {
        targets
            .iter()
            .enumerate()
            .map(|(i, t)| {
                let mut c: Vec<(usize, f64)> = sources
                    .iter()
                    .enumerate()
                    .filter(|&(j, _)| admissible(i, j))
                    .map(|(j, s)| (j, dist(*s, *t)))
                    .filter(|&(_, d)| d <= radius)
                    .collect();
                c.sort_by(|a, b| a.1.partial_cmp(&b.1).unwrap().then(a.0.cmp(&b.0)));
                c.truncate(k);
                c.into_iter().map(|(j, _)| j).collect()
            })
            .collect()
    }

    fn neighbors_of(table: &EdgeTable, dst: usize) -> Vec<usize> {
        table
            .src
            .iter()
            .zip(&table.dst)
            .filter(|&(_, &d)| d == dst)
            .map(|(&s, _)| s)
            .collect()
    }

    #[test]
    fn lane_sampling_spacing_and_endpoints() {
        let frame = Frame { origin: [0.0, 0.0], rotation: 0.0 };
        let lane = crate::generator::test_lane_straight(7, [0.0, 0.0], [10.0, 0.0]);
        let nodes = sample_lane_nodes(&[lane], 2.0, &frame).unwrap();
        let coords = nodes.coords.as_ref().unwrap();
        // 10 m at ≤2 m spacing: 5 segments, 6 nodes, endpoints exact
        assert_eq!(nodes.count(), 6);
        assert_eq!(coords[0], [0.0, 0.0]);
        assert_eq!(coords[5], [10.0, 0.0]);
        for w in coords.windows(2) {
            assert!(dist(w[0], w[1]) <= 2.0 + 1e-12);
        }
        // a very short lane still gets at least two nodes
        let tiny = crate::generator::test_lane_straight(8, [0.0, 0.0], [0.5, 0.0]);
        let nodes = sample_lane_nodes(&[tiny], 2.0, &frame).unwrap();
        assert_eq!(nodes.count(), 2);
    }

    #[test]
    fn degenerate_lane_rejected() {
        let mut lane = crate::generator::test_lane_straight(9, [1.0, 1.0], [1.0, 1.0]);
        lane.centerline = vec![[1.0, 1.0], [1.0, 1.0]];
        lane.left_dist = vec![1.75; 2];
        lane.right_dist = vec![1.75; 2];
        let frame = Frame { origin: [0.0, 0.0], rotation: 0.0 };
        assert!(matches!(
            sample_lane_nodes(&[lane], 2.0, &frame),
            Err(Error::Graph(_))
        ));
    }

    #[test]
    fn step_lane_edges_match_brute_force_oracle() {
        let cfg = Config::desk_test();
        for seed in 0..10u64 {
            for kind in ScenarioKind::ALL {
                let (sc, g) = desk_graph(kind, 6, seed);
                let sh = g.steps.heading.as_ref().unwrap();
                let lh = g.lanes.heading.as_ref().unwrap();
                let owners = g.steps.owner.as_ref().unwrap();
                let gate = cfg.orientation_gate_deg.to_radians();
                let types: Vec<AgentType> =
                    sc.tracks.iter().map(|t| t.agent_type).collect();
                let expect = brute_knn(
                    g.steps.coords.as_ref().unwrap(),
                    g.lanes.coords.as_ref().unwrap(),
                    |si, li| orientation_ok(types[owners[si]], sh[si], lh[li], gate),
                    cfg.knn_k,
                    cfg.step_lane_radius,
                );
                let table = g.edge(Relation::LaneToStep);
                for (si, want) in expect.iter().enumerate() {
                    let mut got = neighbors_of(table, si);
                    let mut want = want.clone();
                    got.sort_unstable();
                    want.sort_unstable();
                    assert_eq!(got, want, "{kind:?} seed {seed} step {si}");
                }
            }
        }
    }

    #[test]
    fn step_step_edges_match_brute_force_oracle() {
        let cfg = Config::desk_test();
        for seed in 0..10u64 {
            let (_, g) = desk_graph(ScenarioKind::Intersection, 8, seed);
            let ts = g.steps.timestep.as_ref().unwrap();
            let owners = g.steps.owner.as_ref().unwrap();
            let expect = brute_knn(
                g.steps.coords.as_ref().unwrap(),
                g.steps.coords.as_ref().unwrap(),
                |i, j| owners[i] != owners[j] && ts[i] == ts[j],
                cfg.knn_k,
                cfg.step_step_radius,
            );
            let table = g.edge(Relation::StepToStep);
            for (si, want) in expect.iter().enumerate() {
                let mut got = neighbors_of(table, si);
                let mut want = want.clone();
                got.sort_unstable();
                want.sort_unstable();
                assert_eq!(got, want, "seed {seed} step {si}");
            }
        }
    }

    #[test]
    fn knn_budget_and_radius_respected() {
        let cfg = Config::desk_test();
        for seed in 0..5u64 {
            let (_, g) = desk_graph(ScenarioKind::Straight, 10, seed);
            let lc = g.lanes.coords.as_ref().unwrap();
            let sc = g.steps.coords.as_ref().unwrap();
            let table = g.edge(Relation::LaneToStep);
            let mut per_dst = vec![0usize; g.steps.count()];
            for (&li, &si) in table.src.iter().zip(&table.dst) {
                per_dst[si] += 1;
                assert!(dist(lc[li], sc[si]) <= cfg.step_lane_radius + 1e-12);
            }
            assert!(per_dst.iter().all(|&c| c <= cfg.knn_k));
        }
    }

    #[test]
    fn trajectory_edges_complete_and_owned() {
        let (_, g) = desk_graph(ScenarioKind::Curve, 5, 3);
        let s2t = g.edge(Relation::StepToTraj);
        let t2s = g.edge(Relation::TrajToStep);
        assert_eq!(s2t.len(), g.steps.count());
        assert_eq!(t2s.len(), g.steps.count());
        let owners = g.steps.owner.as_ref().unwrap();
        for (&si, &ai) in s2t.src.iter().zip(&s2t.dst) {
            assert_eq!(owners[si], ai);
        }
        for (&ai, &si) in t2s.src.iter().zip(&t2s.dst) {
            assert_eq!(owners[si], ai);
        }
    }

    #[test]
    fn lane_chain_edges_bridge_connectivity() {
        let (sc, g) = desk_graph(ScenarioKind::Intersection, 2, 0);
        let lane_of = g.lanes.lane_of.as_ref().unwrap();
        let succ = g.edge(Relation::LaneSucc);
        let pred = g.edge(Relation::LanePred);
        // mirrored relations
        let a: BTreeSet<(usize, usize)> =
            succ.src.iter().zip(&succ.dst).map(|(&s, &d)| (s, d)).collect();
        let b: BTreeSet<(usize, usize)> =
            pred.src.iter().zip(&pred.dst).map(|(&s, &d)| (d, s)).collect();
        assert_eq!(a, b);
        // every declared successor pair is bridged at node level
        for lane in &sc.lanes {
            for s in &lane.successors {
                let bridged = succ
                    .src
                    .iter()
                    .zip(&succ.dst)
                    .any(|(&j, &i)| lane_of[i] == lane.id && lane_of[j] == *s);
                assert!(bridged, "lane {} -> {} not bridged", lane.id, s);
            }
        }
    }

    #[test]
    fn graph_is_invariant_to_rigid_scene_motion() {
        let cfg = Config::desk_test();
        let layout = timestep_layout(cfg.rate_hz).unwrap();
        let sc = generate_synthetic(ScenarioKind::Intersection, 6, 11, &layout);
        let g0 = assemble_scene_graph(&sc, &cfg).unwrap();

        // rotate + translate everything rigidly; the focal frame must cancel it
        let theta: f64 = 0.7;
        let (s, c) = theta.sin_cos();
        let shift = [123.0, -45.0];
        let mv = |p: [f64; 2]| [c * p[0] - s * p[1] + shift[0], s * p[0] + c * p[1] + shift[1]];
        let mut sc2 = sc.clone();
        for lane in &mut sc2.lanes {
            for p in &mut lane.centerline {
                *p = mv(*p);
            }
        }
        for track in &mut sc2.tracks {
            for st in &mut track.states {
                let p = mv([st.x, st.y]);
                let v = [c * st.vx - s * st.vy, s * st.vx + c * st.vy];
                st.x = p[0];
                st.y = p[1];
                st.vx = v[0];
                st.vy = v[1];
                st.heading = wrap_angle(st.heading + theta);
            }
        }
        let g1 = assemble_scene_graph(&sc2, &cfg).unwrap();

        // deterministic relations must match index-for-index
        for r in [
            Relation::LaneSucc,
            Relation::LanePred,
            Relation::LaneLeft,
            Relation::LaneRight,
            Relation::StepToTraj,
            Relation::TrajToStep,
        ] {
            let (e0, e1) = (&g0.edges[&r], &g1.edges[&r]);
            assert_eq!(e0.src, e1.src, "{r:?}");
            assert_eq!(e0.dst, e1.dst, "{r:?}");
            for (x, y) in e0.features.data.iter().zip(&e1.features.data) {
                assert!((x - y).abs() < 1e-6, "{r:?}: {x} vs {y}");
            }
        }
        // k-NN relations can reorder exactly-tied candidates under rotation;
        // compare the per-target neighbor distance multisets instead
        let edge_dist = |g: &HeteroGraph, r: Relation, e: &EdgeTable| -> Vec<Vec<f64>> {
            let (src_t, _) = r.endpoints();
            let sc = match src_t {
                NodeType::Lane => g.lanes.coords.as_ref().unwrap(),
                _ => g.steps.coords.as_ref().unwrap(),
            };
            let dc = match r {
                Relation::StepToLane => g.lanes.coords.as_ref().unwrap(),
                _ => g.steps.coords.as_ref().unwrap(),
            };
            let n_dst = dc.len();
            let mut per: Vec<Vec<f64>> = vec![vec![]; n_dst];
            for (&j, &i) in e.src.iter().zip(&e.dst) {
                per[i].push(dist(sc[j], dc[i]));
            }
            for v in &mut per {
                v.sort_by(|a, b| a.partial_cmp(b).unwrap());
            }
            per
        };
        for r in [Relation::LaneToStep, Relation::StepToLane, Relation::StepToStep] {
            let d0 = edge_dist(&g0, r, &g0.edges[&r]);
            let d1 = edge_dist(&g1, r, &g1.edges[&r]);
            assert_eq!(d0.len(), d1.len(), "{r:?}");
            for (a, b) in d0.iter().zip(&d1) {
                assert_eq!(a.len(), b.len(), "{r:?}");
                for (x, y) in a.iter().zip(b) {
                    assert!((x - y).abs() < 1e-6, "{r:?}: {x} vs {y}");
                }
            }
        }
        for (a, b) in g0.steps.features.data.iter().zip(&g1.steps.features.data) {
            assert!((a - b).abs() < 1e-6);
        }
        for (a, b) in g0.lanes.features.data.iter().zip(&g1.lanes.features.data) {
            assert!((a - b).abs() < 1e-6);
        }
    }

    #[test]
    fn assembly_is_deterministic() {
        let (_, g0) = desk_graph(ScenarioKind::Straight, 7, 21);
        let (_, g1) = desk_graph(ScenarioKind::Straight, 7, 21);
        assert_eq!(g0.lanes.features.data, g1.lanes.features.data);
        assert_eq!(g0.steps.features.data, g1.steps.features.data);
        for (r, e0) in &g0.edges {
            let e1 = &g1.edges[r];
            assert_eq!(e0.src, e1.src, "{r:?}");
            assert_eq!(e0.features.data, e1.features.data, "{r:?}");
        }
    }

    #[test]
    fn removed_edges_are_empty_but_typed() {
        let mut cfg = Config::desk_test();
        cfg.removed_edges =
            BTreeSet::from([Relation::StepToStep, Relation::LaneToStep]);
        let layout = timestep_layout(cfg.rate_hz).unwrap();
        let sc = generate_synthetic(ScenarioKind::Straight, 5, 4, &layout);
        let g = assemble_scene_graph(&sc, &cfg).unwrap();
        assert!(g.edge(Relation::StepToStep).is_empty());
        assert!(g.edge(Relation::LaneToStep).is_empty());
        assert!(!g.edge(Relation::StepToLane).is_empty());
    }

    #[test]
    fn orientation_gate_blocks_opposing_lanes_for_vehicles_only() {
        let gate = 60f64.to_radians();
        assert!(orientation_ok(AgentType::Vehicle, 0.0, 0.3, gate));
        assert!(!orientation_ok(AgentType::Vehicle, 0.0, std::f64::consts::PI, gate));
        assert!(orientation_ok(AgentType::Pedestrian, 0.0, std::f64::consts::PI, gate));
    }

    #[test]
    fn feature_dims_and_frame_origin() {
        let (_, g) = desk_graph(ScenarioKind::Curve, 4, 9);
        assert_eq!(g.lanes.features.cols(), LANE_FEAT_DIM);
        assert_eq!(g.steps.features.cols(), STEP_FEAT_DIM);
        assert_eq!(g.obs_seq[0].cols(), TRAJ_SEQ_FEAT_DIM);
        assert_eq!(g.gt_future[0].shape, vec![g.t_fut, 2]);
        // the focal agent's last observed step sits at the frame origin
        let focal_last = g.agents[0].last_obs_pos;
        assert!(focal_last[0].abs() < 1e-9 && focal_last[1].abs() < 1e-9);
    }
}

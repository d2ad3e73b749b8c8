//! Map-projection refinement: trajectory proposals become step nodes on a
//! fresh graph over the (frozen) map-encoded lane nodes, and transformer
//! convolutions iteratively pull them toward plausible lane geometry.
//!
//! Each iteration: (1) rebuild lane→step edges from the current coordinates
//! and attend lane→step; (2) accumulate step→trajectory; (3) distribute
//! trajectory→step; (4) add the offset-head output to the coordinates. The
//! offset head's final layer is zero-initialized, so an untrained module is
//! exactly the identity on coordinates.

use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::forecaster::{ConfidenceHead, PredictionSet};
use crate::graph::HeteroGraph;
use crate::nn::{Linear, MlpBn, Mode, ParameterStore, LEAKY_SLOPE};
use crate::scenario::AgentType;
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

/// Edge feature width for dynamic lane→step edges: displacement in the
/// normalization frame plus the lane node's direction (cos, sin).
pub const DYN_EDGE_DIM: usize = 4;
/// Edge feature width for the static step↔trajectory relays.
pub const RELAY_EDGE_DIM: usize = 1;

/// The proposal graph the refinement module iterates on.
pub struct RefinementGraph {
    /// Frozen map-encoded lane features, `[N_lane × D]`.
    pub lane_feats: Var,
    /// Lane node positions in the normalization frame.
    pub lane_coords: Vec<[f64; 2]>,
    /// Lane node directions (radians, normalization frame).
    pub lane_dirs: Vec<f64>,
    /// Current step coordinates, `[(A·K·T_fut) × 2]` — a differentiable Var.
    pub step_coords: Var,
    /// Step node features, `[(A·K·T_fut) × D]`.
    pub step_feats: Var,
    /// Per-mode trajectory node features, `[(A·K) × D]`.
    pub traj_feats: Var,
    pub n_agents: usize,
    pub k: usize,
    pub t_fut: usize,
}

impl RefinementGraph {
    pub fn n_steps(&self) -> usize {
        self.n_agents * self.k * self.t_fut
    }

    /// Trajectory node owning each step node (agent-major, mode, time).
    pub fn step_owner(&self) -> Vec<usize> {
        (0..self.n_steps()).map(|s| s / self.t_fut).collect()
    }
}

/// Exact k-NN (k = min(5, N_lane), no radius cap) from every step node to the
/// lane table; ties broken toward the lower lane index. Returns (lane index,
/// step index) pairs, step-major.
pub fn dynamic_edges(
    step_coords: &[f64],
    lane_coords: &[[f64; 2]],
) -> Result<(Vec<usize>, Vec<usize>)> {
    if lane_coords.is_empty() {
        return Err(Error::RefinementContract(
            "refinement requires a non-empty lane node table".into(),
        ));
    }
    let n_steps = step_coords.len() / 2;
    let k = lane_coords.len().min(5);
    let mut src = Vec::with_capacity(n_steps * k);
    let mut dst = Vec::with_capacity(n_steps * k);
    for s in 0..n_steps {
        let p = [step_coords[s * 2], step_coords[s * 2 + 1]];
        let mut cand: Vec<(usize, f64)> = lane_coords
            .iter()
            .enumerate()
            .map(|(l, q)| (l, (q[0] - p[0]).powi(2) + (q[1] - p[1]).powi(2)))
            .collect();
        cand.sort_by(|a, b| a.1.partial_cmp(&b.1).unwrap().then(a.0.cmp(&b.0)));
        for &(l, _) in cand.iter().take(k) {
            src.push(l);
            dst.push(s);
        }
    }
    Ok((src, dst))
}

/// Single-relation scaled-dot-product attention with edge features on keys
/// and values, plus an identity residual on the targets.
pub struct TransformerConv {
    pub name: String,
    pub d: usize,
    pub heads: usize,
    pub e_dim: usize,
}

impl TransformerConv {
    pub fn new(name: impl Into<String>, d: usize, heads: usize, e_dim: usize) -> Self {
        assert!(heads > 0 && d % heads == 0);
        TransformerConv { name: name.into(), d, heads, e_dim }
    }

    fn dh(&self) -> usize {
        self.d / self.heads
    }

    pub fn init(&self, store: &mut ParameterStore, rng: &mut ChaCha8Rng) {
        let dh = self.dh();
        for h in 0..self.heads {
            for w in ["w_q", "w_k", "w_v"] {
                store.insert(
                    &format!("{}.h{h}.{w}", self.name),
                    crate::nn::xavier_uniform(rng, self.d, dh),
                );
            }
            for w in ["w_ke", "w_ve"] {
                store.insert(
                    &format!("{}.h{h}.{w}", self.name),
                    crate::nn::xavier_uniform(rng, self.e_dim, dh),
                );
            }
        }
        store.insert(&format!("{}.w_o", self.name), crate::nn::xavier_uniform(rng, self.d, self.d));
        store.insert(&format!("{}.b_o", self.name), Tensor::zeros(vec![self.d]));
    }

    /// `x_dst [N_dst × D]`, `x_src [N_src × D]`, edges (src, dst) with
    /// features `e [E × e_dim]`. Returns updated `[N_dst × D]`.
    pub fn forward(
        &self,
        tape: &mut Tape,
        store: &ParameterStore,
        x_dst: Var,
        x_src: Var,
        src: &[usize],
        dst: &[usize],
        e: Var,
    ) -> Result<Var> {
        if src.len() != dst.len() || tape.value(e).rows() != src.len() {
            return Err(Error::Graph("transformer conv: edge arrays disagree".into()));
        }
        let n_dst = tape.value(x_dst).rows();
        let dh = self.dh();
        let scale = 1.0 / (dh as f64).sqrt();
        let mut head_outs = Vec::with_capacity(self.heads);
        for h in 0..self.heads {
            let p = |w: &str| format!("{}.h{h}.{w}", self.name);
            let w_q = tape.param(&p("w_q"), store.get(&p("w_q")));
            let w_k = tape.param(&p("w_k"), store.get(&p("w_k")));
            let w_v = tape.param(&p("w_v"), store.get(&p("w_v")));
            let w_ke = tape.param(&p("w_ke"), store.get(&p("w_ke")));
            let w_ve = tape.param(&p("w_ve"), store.get(&p("w_ve")));
            let q_all = tape.matmul(x_dst, w_q);
            let k_all = tape.matmul(x_src, w_k);
            let v_all = tape.matmul(x_src, w_v);
            let q = tape.gather_rows(q_all, dst);
            let k_node = tape.gather_rows(k_all, src);
            let ke = tape.matmul(e, w_ke);
            let k = tape.add(k_node, ke);
            let v_node = tape.gather_rows(v_all, src);
            let ve = tape.matmul(e, w_ve);
            let v = tape.add(v_node, ve);
            let qk = tape.mul(q, k);
            let dot = tape.rowwise_sum(qk);
            let dot = tape.scale(dot, scale);
            let logits = tape.reshape(dot, vec![src.len(), 1]);
            let alpha = tape.segment_softmax(logits, dst);
            let alpha_vec = tape.reshape(alpha, vec![src.len()]);
            let weighted = tape.mul_rowscale(v, alpha_vec);
            let pooled = tape.segment_sum(weighted, dst, n_dst);
            head_outs.push(pooled);
        }
        let attn = tape.concat_cols(&head_outs);
        let w_o = tape.param(&format!("{}.w_o", self.name), store.get(&format!("{}.w_o", self.name)));
        let b_o = tape.param(&format!("{}.b_o", self.name), store.get(&format!("{}.b_o", self.name)));
        let proj = tape.matmul(attn, w_o);
        let proj = tape.add_row(proj, b_o);
        Ok(tape.add(x_dst, proj))
    }
}

pub struct RefinementModule {
    pub d: usize,
    pub heads: usize,
    pub iterations: usize,
    step_in: Linear,
    lane_to_step: TransformerConv,
    step_to_traj: TransformerConv,
    traj_to_step: TransformerConv,
    offset_body: MlpBn,
    offset_out: Linear,
    confidence: ConfidenceHead,
}

impl RefinementModule {
    pub fn new(name: &str, d: usize, heads: usize, iterations: usize) -> Self {
        assert!(iterations >= 1);
        RefinementModule {
            d,
            heads,
            iterations,
            step_in: Linear::new(format!("{name}.step_in"), d + 3, d),
            lane_to_step: TransformerConv::new(format!("{name}.l2s"), d, heads, DYN_EDGE_DIM),
            step_to_traj: TransformerConv::new(format!("{name}.s2t"), d, heads, RELAY_EDGE_DIM),
            traj_to_step: TransformerConv::new(format!("{name}.t2s"), d, heads, RELAY_EDGE_DIM),
            offset_body: MlpBn::new(format!("{name}.offset"), &[d, d, d], true, true),
            offset_out: Linear::new(format!("{name}.offset.out"), d, 2),
            confidence: ConfidenceHead::new(&format!("{name}.conf"), d),
        }
    }

    pub fn init(&self, store: &mut ParameterStore, rng: &mut ChaCha8Rng) {
        self.step_in.init(store, rng);
        self.lane_to_step.init(store, rng);
        self.step_to_traj.init(store, rng);
        self.traj_to_step.init(store, rng);
        self.offset_body.init(store, rng);
        self.offset_out.init_zero(store);
        self.confidence.init(store, rng);
    }

    /// Assemble the refinement graph from proposals and encoded scene parts.
    /// `lane_feats` must be the map-encoder output aligned with the scene
    /// graph's lane table; `final_feats` the per-agent final features.
    pub fn init_graph(
        &self,
        tape: &mut Tape,
        store: &ParameterStore,
        graph: &HeteroGraph,
        pred: &PredictionSet,
        lane_feats: Var,
        final_feats: Var,
    ) -> Result<RefinementGraph> {
        let lane_coords = graph
            .lanes
            .coords
            .clone()
            .ok_or_else(|| Error::RefinementContract("lane nodes must carry coordinates".into()))?;
        let lane_dirs = graph
            .lanes
            .heading
            .clone()
            .ok_or_else(|| Error::RefinementContract("lane nodes must carry directions".into()))?;
        if tape.value(lane_feats).rows() != lane_coords.len() {
            return Err(Error::RefinementContract(
                "lane features and coordinates disagree in length".into(),
            ));
        }
        let (a, k, t) = (pred.n_agents, pred.k, pred.t_fut);
        if tape.value(pred.coords).rows() != a * k * t {
            return Err(Error::RefinementContract(
                "prediction coordinates missing or mis-shaped".into(),
            ));
        }

        // step init: mode aux feature + positional encoding (t_norm, x, y)
        let n_steps = a * k * t;
        let aux_rep: Vec<usize> = (0..n_steps).map(|s| s / t).collect();
        let aux_rows = tape.gather_rows(pred.aux, &aux_rep);
        let t_norm = Tensor::new(
            vec![n_steps, 1],
            (0..n_steps).map(|s| (s % t) as f64 / t.max(2) as f64).collect(),
        );
        let t_leaf = tape.leaf(t_norm);
        let pos = tape.concat_cols(&[aux_rows, t_leaf, pred.coords]);
        let raw = self.step_in.forward(tape, store, pos);
        let step_feats = tape.leaky_relu(raw, LEAKY_SLOPE);

        // trajectory node init: owner agent's final feature vector
        let owner: Vec<usize> = (0..a * k).map(|r| r / k).collect();
        let traj_feats = tape.gather_rows(final_feats, &owner);

        Ok(RefinementGraph {
            lane_feats,
            lane_coords,
            lane_dirs,
            step_coords: pred.coords,
            step_feats,
            traj_feats,
            n_agents: a,
            k,
            t_fut: t,
        })
    }

    /// Differentiable edge features for the current dynamic edges:
    /// displacement (lane − step, normalization frame) and lane direction.
    fn dyn_edge_features(
        &self,
        tape: &mut Tape,
        rg: &RefinementGraph,
        src: &[usize],
        dst: &[usize],
    ) -> Var {
        let lane_rows: Vec<Vec<f64>> = src
            .iter()
            .map(|&l| vec![rg.lane_coords[l][0], rg.lane_coords[l][1]])
            .collect();
        let lane_pos = tape.leaf(Tensor::from_rows(&lane_rows));
        let step_pos = tape.gather_rows(rg.step_coords, dst);
        let disp = tape.sub(lane_pos, step_pos);
        let dirs: Vec<Vec<f64>> = src
            .iter()
            .map(|&l| vec![rg.lane_dirs[l].cos(), rg.lane_dirs[l].sin()])
            .collect();
        let dir_leaf = tape.leaf(Tensor::from_rows(&dirs));
        tape.concat_cols(&[disp, dir_leaf])
    }

    fn relay_features(&self, tape: &mut Tape, rg: &RefinementGraph) -> Var {
        let t = rg.t_fut;
        let rows: Vec<Vec<f64>> =
            (0..rg.n_steps()).map(|s| vec![(s % t) as f64 / t.max(2) as f64]).collect();
        tape.leaf(Tensor::from_rows(&rows))
    }

    /// Steps 1–4 once, mutating the graph's coordinate and feature Vars.
    pub fn iteration(
        &self,
        tape: &mut Tape,
        store: &ParameterStore,
        rg: &mut RefinementGraph,
        mode: Mode,
    ) -> Result<()> {
        // step 1: dynamic lane→step attention
        let (src, dst) = dynamic_edges(&tape.value(rg.step_coords).data, &rg.lane_coords)?;
        let e_dyn = self.dyn_edge_features(tape, rg, &src, &dst);
        rg.step_feats = self.lane_to_step.forward(
            tape,
            store,
            rg.step_feats,
            rg.lane_feats,
            &src,
            &dst,
            e_dyn,
        )?;
        // steps 2–3: accumulate then distribute over the static relays
        let owner = rg.step_owner();
        let steps_idx: Vec<usize> = (0..rg.n_steps()).collect();
        let e_relay = self.relay_features(tape, rg);
        rg.traj_feats = self.step_to_traj.forward(
            tape,
            store,
            rg.traj_feats,
            rg.step_feats,
            &steps_idx,
            &owner,
            e_relay,
        )?;
        let e_relay = self.relay_features(tape, rg);
        rg.step_feats = self.traj_to_step.forward(
            tape,
            store,
            rg.step_feats,
            rg.traj_feats,
            &owner,
            &steps_idx,
            e_relay,
        )?;
        // step 4: offsets
        let h = self.offset_body.forward(tape, store, rg.step_feats, mode);
        let offsets = self.offset_out.forward(tape, store, h);
        rg.step_coords = tape.add(rg.step_coords, offsets);
        Ok(())
    }

    /// Full refinement: configured iterations, one final accumulation, then
    /// the refinement confidence head.
    pub fn forward(
        &self,
        tape: &mut Tape,
        store: &ParameterStore,
        graph: &HeteroGraph,
        pred: &PredictionSet,
        lane_feats: Var,
        final_feats: Var,
        mode: Mode,
    ) -> Result<PredictionSet> {
        let mut rg = self.init_graph(tape, store, graph, pred, lane_feats, final_feats)?;
        for _ in 0..self.iterations {
            self.iteration(tape, store, &mut rg, mode)?;
        }
        // final accumulation feeds the confidence network
        let owner = rg.step_owner();
        let steps_idx: Vec<usize> = (0..rg.n_steps()).collect();
        let e_relay = self.relay_features(tape, &rg);
        let traj_final = self.step_to_traj.forward(
            tape,
            store,
            rg.traj_feats,
            rg.step_feats,
            &steps_idx,
            &owner,
            e_relay,
        )?;
        let rep: Vec<usize> =
            (0..rg.n_agents).flat_map(|a| std::iter::repeat(a).take(rg.k)).collect();
        let final_rep = tape.gather_rows(final_feats, &rep);
        let pairs = tape.concat_cols(&[final_rep, traj_final]);
        let agent_types: Vec<AgentType> = graph.agents.iter().map(|a| a.agent_type).collect();
        let (confidences, logits) =
            self.confidence.forward(tape, store, pairs, &agent_types, rg.k, mode)?;
        Ok(PredictionSet {
            n_agents: rg.n_agents,
            k: rg.k,
            t_fut: rg.t_fut,
            coords: rg.step_coords,
            aux: traj_final,
            logits,
            confidences,
        })
    }
}

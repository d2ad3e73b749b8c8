//! Encoder pipeline: per-type raw feature encoders, the lane-only map
//! encoder, the full scene encoder, and the final feature processor.

use std::collections::BTreeMap;

use rand_chacha::ChaCha8Rng;

use crate::error::Result;
use crate::graph::{
    HeteroGraph, NodeType, Relation, LANE_FEAT_DIM, STEP_FEAT_DIM, TRAJ_SEQ_FEAT_DIM,
};
use crate::hgat::{AttentionRecord, HgatLayer};
use crate::nn::{ConvResidualBlock, MlpBn, Mode, ParameterStore};
use crate::tape::{Tape, Var};

pub const N_MAP_LAYERS: usize = 4;
pub const N_SCENE_LAYERS: usize = 4;

/// All node features after encoding, each `[N × D]`.
pub struct EncodedScene {
    /// Lane features after the map encoder (reused by refinement).
    pub lane_feats: Var,
    /// Trajectory-step features after the scene encoder.
    pub step_feats: Var,
    /// Full-trajectory features after the scene encoder.
    pub traj_feats: Var,
    /// Raw full-trajectory embeddings (the residual branch).
    pub traj_residual: Var,
    /// Output of the final feature processor, `[N_agents × D]`.
    pub final_feats: Var,
    pub attention: Vec<AttentionRecord>,
}

pub struct EncoderStack {
    pub d: usize,
    step_enc: MlpBn,
    lane_enc: MlpBn,
    traj_block1: ConvResidualBlock,
    traj_block2: ConvResidualBlock,
    map_layers: Vec<HgatLayer>,
    scene_layers: Vec<HgatLayer>,
    final_mlp: MlpBn,
}

impl EncoderStack {
    pub fn new(name: &str, d: usize, heads: usize) -> Self {
        let four = [STEP_FEAT_DIM, d, d, d, d];
        let lane_dims = [LANE_FEAT_DIM, d, d, d, d];
        EncoderStack {
            d,
            step_enc: MlpBn::new(format!("{name}.step"), &four, true, true),
            lane_enc: MlpBn::new(format!("{name}.lane"), &lane_dims, true, true),
            traj_block1: ConvResidualBlock::causal(format!("{name}.traj1"), TRAJ_SEQ_FEAT_DIM, d),
            traj_block2: ConvResidualBlock::causal(format!("{name}.traj2"), d, d),
            map_layers: (0..N_MAP_LAYERS)
                .map(|i| {
                    HgatLayer::new(format!("{name}.map{i}"), d, heads, &Relation::LANE_RELATIONS)
                })
                .collect(),
            scene_layers: (0..N_SCENE_LAYERS)
                .map(|i| HgatLayer::new(format!("{name}.scene{i}"), d, heads, &Relation::ALL))
                .collect(),
            final_mlp: MlpBn::new(format!("{name}.final"), &[2 * d, d, d, d], true, true),
        }
    }

    pub fn init(&self, store: &mut ParameterStore, rng: &mut ChaCha8Rng) {
        self.step_enc.init(store, rng);
        self.lane_enc.init(store, rng);
        self.traj_block1.init(store, rng);
        self.traj_block2.init(store, rng);
        for l in &self.map_layers {
            l.init(store, rng);
        }
        for l in &self.scene_layers {
            l.init(store, rng);
        }
        self.final_mlp.init(store, rng);
    }

    /// Full-trajectory embeddings: two causal residual conv blocks over each
    /// agent's observed sequence, read off at the last observed timestep.
    pub fn encode_full_trajectories(
        &self,
        tape: &mut Tape,
        store: &ParameterStore,
        graph: &HeteroGraph,
        mode: Mode,
    ) -> Var {
        let mut rows = Vec::with_capacity(graph.n_agents());
        for seq in &graph.obs_seq {
            let x = tape.leaf(seq.clone());
            let h = self.traj_block1.forward(tape, store, x, mode);
            let h = self.traj_block2.forward(tape, store, h, mode);
            let last = tape.gather_rows(h, &[seq.rows() - 1]);
            rows.push(last);
        }
        tape.concat_rows(&rows)
    }

    /// Four HGAT layers over lane/lane relations only.
    pub fn encode_map(
        &self,
        tape: &mut Tape,
        store: &ParameterStore,
        graph: &HeteroGraph,
        lane_feats: Var,
        mut attention: Option<&mut Vec<AttentionRecord>>,
    ) -> Result<Var> {
        let mut feats = BTreeMap::from([(NodeType::Lane, lane_feats)]);
        for layer in &self.map_layers {
            feats = layer.forward(tape, store, &feats, graph, attention.as_deref_mut())?;
        }
        Ok(feats[&NodeType::Lane])
    }

    /// Full pipeline over one scene graph.
    pub fn forward(
        &self,
        tape: &mut Tape,
        store: &ParameterStore,
        graph: &HeteroGraph,
        mode: Mode,
        collect_attention: bool,
    ) -> Result<EncodedScene> {
        let mut attention = Vec::new();
        let sink = collect_attention.then_some(&mut attention);

        let lane_raw = tape.leaf(graph.lanes.features.clone());
        let step_raw = tape.leaf(graph.steps.features.clone());
        let lane0 = self.lane_enc.forward(tape, store, lane_raw, mode);
        let step0 = self.step_enc.forward(tape, store, step_raw, mode);
        let traj_residual = self.encode_full_trajectories(tape, store, graph, mode);

        let mut sink = sink;
        let lane1 = self.encode_map(tape, store, graph, lane0, sink.as_deref_mut())?;

        let mut feats = BTreeMap::from([
            (NodeType::Lane, lane1),
            (NodeType::TrajectoryStep, step0),
            (NodeType::FullTrajectory, traj_residual),
        ]);
        for layer in &self.scene_layers {
            feats = layer.forward(tape, store, &feats, graph, sink.as_deref_mut())?;
        }

        let combined = tape.concat_cols(&[feats[&NodeType::FullTrajectory], traj_residual]);
        let final_feats = self.final_mlp.forward(tape, store, combined, mode);

        Ok(EncodedScene {
            lane_feats: feats[&NodeType::Lane],
            step_feats: feats[&NodeType::TrajectoryStep],
            traj_feats: feats[&NodeType::FullTrajectory],
            traj_residual,
            final_feats,
            attention,
        })
    }
}

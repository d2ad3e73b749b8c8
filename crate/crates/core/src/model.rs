//! The full model: encoder stack → multi-modal forecaster → optional
//! map-projection refinement, with world-frame prediction extraction.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::config::Config;
use crate::encoders::EncoderStack;
use crate::error::Result;
use crate::forecaster::{Forecaster, PredictionSet};
use crate::graph::HeteroGraph;
use crate::hgat::AttentionRecord;
use crate::nn::{Mode, ParameterStore};
use crate::refinement::RefinementModule;
use crate::tape::Tape;

#[derive(Debug, Clone, Serialize)]
pub struct ModePrediction {
    pub confidence: f64,
    /// Future points in the world frame, one per future timestep.
    pub points: Vec<[f64; 2]>,
}

#[derive(Debug, Clone, Serialize)]
pub struct AgentPrediction {
    pub agent_id: u64,
    pub modes: Vec<ModePrediction>,
}

/// Everything one forward pass produces. `predictions` is the world-frame
/// view of the final (refined if requested) prediction set; the raw sets are
/// kept as tape Vars for losses.
pub struct ForwardOutput {
    pub proposals: PredictionSet,
    pub refined: Option<PredictionSet>,
    pub predictions: Vec<AgentPrediction>,
    pub attention: Vec<AttentionRecord>,
}

impl ForwardOutput {
    /// The set the model stands behind: refined when present, else proposals.
    pub fn final_set(&self) -> &PredictionSet {
        self.refined.as_ref().unwrap_or(&self.proposals)
    }
}

pub struct Model {
    pub cfg: Config,
    pub encoders: EncoderStack,
    pub forecaster: Forecaster,
    pub refinement: RefinementModule,
    pub store: ParameterStore,
}

impl Model {
    pub fn new(cfg: &Config, seed: u64) -> Self {
        let layout = crate::scenario::timestep_layout(cfg.rate_hz).expect("valid rate");
        let d = cfg.d_model;
        let encoders = EncoderStack::new("enc", d, cfg.heads);
        let forecaster = Forecaster::new("fc", d, cfg.n_modes, layout.t_fut);
        let refinement =
            RefinementModule::new("refine", d, cfg.refine_heads, cfg.refine_iterations);
        let mut store = ParameterStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        encoders.init(&mut store, &mut rng);
        forecaster.init(&mut store, &mut rng);
        refinement.init(&mut store, &mut rng);
        Model { cfg: cfg.clone(), encoders, forecaster, refinement, store }
    }

    pub fn forward(
        &self,
        tape: &mut Tape,
        graph: &HeteroGraph,
        mode: Mode,
        refine: bool,
    ) -> Result<ForwardOutput> {
        self.forward_opts(tape, graph, mode, refine, false)
    }

    pub fn forward_opts(
        &self,
        tape: &mut Tape,
        graph: &HeteroGraph,
        mode: Mode,
        refine: bool,
        collect_attention: bool,
    ) -> Result<ForwardOutput> {
        let scene = self.encoders.forward(tape, &self.store, graph, mode, collect_attention)?;
        let proposals =
            self.forecaster.forward(tape, &self.store, graph, scene.final_feats, mode)?;
        let refined = if refine {
            Some(self.refinement.forward(
                tape,
                &self.store,
                graph,
                &proposals,
                scene.lane_feats,
                scene.final_feats,
                mode,
            )?)
        } else {
            None
        };
        let predictions = {
            let set = refined.as_ref().unwrap_or(&proposals);
            extract_predictions(tape, graph, set)
        };
        Ok(ForwardOutput { proposals, refined, predictions, attention: scene.attention })
    }
}

/// Convert a prediction set's normalization-frame coordinates back to the
/// world frame and pair them with per-mode confidences.
pub fn extract_predictions(
    tape: &Tape,
    graph: &HeteroGraph,
    set: &PredictionSet,
) -> Vec<AgentPrediction> {
    let coords = tape.value(set.coords);
    let conf = tape.value(set.confidences);
    let (k, t) = (set.k, set.t_fut);
    graph
        .agents
        .iter()
        .enumerate()
        .map(|(a, meta)| {
            let modes = (0..k)
                .map(|m| {
                    let base = (a * k + m) * t;
                    let points = (0..t)
                        .map(|i| {
                            let r = base + i;
                            graph.frame.from_frame([coords.data[r * 2], coords.data[r * 2 + 1]])
                        })
                        .collect();
                    ModePrediction { confidence: conf.data[a * k + m], points }
                })
                .collect();
            AgentPrediction { agent_id: meta.track_id, modes }
        })
        .collect()
}

/// Ground-truth future in the world frame for a prediction's agent ordering.
pub fn world_frame_gt(graph: &HeteroGraph) -> Vec<Vec<[f64; 2]>> {
    graph
        .gt_future
        .iter()
        .map(|t| {
            (0..t.rows())
                .map(|r| graph.frame.from_frame([t.data[r * 2], t.data[r * 2 + 1]]))
                .collect()
        })
        .collect()
}

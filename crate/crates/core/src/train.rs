//! Training loop: Adam with cosine learning-rate decay, three regimes
//! (proposals only, frozen-base refinement, end-to-end), deterministic
//! gradient accumulation, and bitwise-reproducible checkpoints.

use std::collections::BTreeMap;
use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::config::Config;
use crate::error::{Error, Result};
use crate::graph::HeteroGraph;
use crate::loss::scene_loss;
use crate::model::Model;
use crate::nn::{Mode, ParameterStore};
use crate::tape::Tape;
use crate::tensor::Tensor;

pub const CHECKPOINT_SCHEMA_VERSION: u32 = 1;

/// Exponential moving-average momentum for batch-norm running statistics.
pub const BN_STAT_MOMENTUM: f64 = 0.1;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Regime {
    /// Train encoders and forecaster; refinement stays untouched.
    None,
    /// Base (encoder/forecaster) parameters frozen bitwise; only the
    /// refinement module trains, on the refined loss.
    Frozen,
    /// Everything trains; the proposal loss joins as an auxiliary term.
    E2e,
}

impl Regime {
    pub fn parse(s: &str) -> Result<Regime> {
        match s {
            "none" => Ok(Regime::None),
            "frozen" => Ok(Regime::Frozen),
            "e2e" => Ok(Regime::E2e),
            other => Err(Error::Config(format!(
                "unknown training regime '{other}' (expected none, frozen, or e2e)"
            ))),
        }
    }

    fn uses_refinement(self) -> bool {
        !matches!(self, Regime::None)
    }

    fn trainable(self, name: &str) -> bool {
        match self {
            Regime::None => !name.starts_with("refine."),
            Regime::Frozen => name.starts_with("refine."),
            Regime::E2e => true,
        }
    }
}

/// Cosine decay from the base rate down to `lr_floor · lr` over `steps`.
pub fn cosine_lr(cfg: &Config, step: usize) -> f64 {
    let t = if cfg.steps <= 1 { 1.0 } else { step as f64 / (cfg.steps - 1) as f64 };
    let floor = cfg.lr * cfg.lr_floor;
    floor + (cfg.lr - floor) * 0.5 * (1.0 + (std::f64::consts::PI * t).cos())
}

/// Adam state, keyed by parameter name so the update order is deterministic.
pub struct Adam {
    m: BTreeMap<String, Tensor>,
    v: BTreeMap<String, Tensor>,
    t: u64,
}

impl Adam {
    pub fn new() -> Self {
        Adam { m: BTreeMap::new(), v: BTreeMap::new(), t: 0 }
    }

    pub fn step(
        &mut self,
        store: &mut ParameterStore,
        grads: &BTreeMap<String, Tensor>,
        cfg: &Config,
        lr: f64,
    ) {
        self.t += 1;
        let bc1 = 1.0 - cfg.beta1.powi(self.t as i32);
        let bc2 = 1.0 - cfg.beta2.powi(self.t as i32);
        for (name, g) in grads {
            let p = store.params.get_mut(name).expect("gradient for unknown parameter");
            let m = self.m.entry(name.clone()).or_insert_with(|| Tensor::zeros(p.shape.clone()));
            let v = self.v.entry(name.clone()).or_insert_with(|| Tensor::zeros(p.shape.clone()));
            for i in 0..p.data.len() {
                m.data[i] = cfg.beta1 * m.data[i] + (1.0 - cfg.beta1) * g.data[i];
                v.data[i] = cfg.beta2 * v.data[i] + (1.0 - cfg.beta2) * g.data[i] * g.data[i];
                let mhat = m.data[i] / bc1;
                let vhat = v.data[i] / bc2;
                p.data[i] -= lr * mhat / (vhat.sqrt() + cfg.adam_eps);
            }
        }
    }
}

impl Default for Adam {
    fn default() -> Self {
        Self::new()
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct LossRow {
    pub step: usize,
    pub l_traj: f64,
    pub l_conf: f64,
    pub total: f64,
}

pub struct TrainReport {
    pub rows: Vec<LossRow>,
}

impl TrainReport {
    pub fn initial_total(&self) -> f64 {
        self.rows.first().map(|r| r.total).unwrap_or(f64::NAN)
    }
    pub fn final_total(&self) -> f64 {
        self.rows.last().map(|r| r.total).unwrap_or(f64::NAN)
    }
}

/// One optimization step's per-scene results, accumulated deterministically.
struct SceneResult {
    grads: Vec<(String, Tensor)>,
    stats: Vec<(String, Tensor)>,
    l_traj: f64,
    l_conf: f64,
    total: f64,
}

fn scene_pass(model: &Model, graph: &HeteroGraph, regime: Regime) -> Result<SceneResult> {
    let mut tape = Tape::new();
    let out = model.forward(&mut tape, graph, Mode::Train, regime.uses_refinement())?;
    let cfg = &model.cfg;
    let main = scene_loss(&mut tape, cfg, out.final_set(), graph)?;
    let (root, l_traj, l_conf) = if regime == Regime::E2e {
        let aux = scene_loss(&mut tape, cfg, &out.proposals, graph)?;
        let aux_total = tape.scale(aux.total, cfg.aux_proposal_weight);
        let root = tape.add(main.total, aux_total);
        (
            root,
            tape.value(main.traj).data[0]
                + cfg.aux_proposal_weight * tape.value(aux.traj).data[0],
            tape.value(main.conf).data[0]
                + cfg.aux_proposal_weight * tape.value(aux.conf).data[0],
        )
    } else {
        (main.total, tape.value(main.traj).data[0], tape.value(main.conf).data[0])
    };
    let total = tape.value(root).data[0];
    if !total.is_finite() {
        return Err(Error::NonFinite { context: "training loss".into(), index: 0, value: total });
    }
    let grads = tape.backward(root);
    let pgrads = tape.param_grads(&grads);
    let stats = std::mem::take(&mut tape.stat_updates);
    Ok(SceneResult { grads: pgrads, stats, l_traj, l_conf, total })
}

/// Run the training loop over pre-assembled scene graphs, mutating the
/// model's parameter store in place.
pub fn train(
    model: &mut Model,
    graphs: &[HeteroGraph],
    regime: Regime,
    parallel: bool,
) -> Result<TrainReport> {
    if graphs.is_empty() {
        return Err(Error::Config("training requires at least one scenario".into()));
    }
    let cfg = model.cfg.clone();
    let mut adam = Adam::new();
    let mut rows = Vec::with_capacity(cfg.steps);
    for step in 0..cfg.steps {
        let batch: Vec<&HeteroGraph> = (0..cfg.batch_size)
            .map(|j| &graphs[(step * cfg.batch_size + j) % graphs.len()])
            .collect();
        let results = crate::parallel::map_ordered(parallel, &batch, |g| {
            scene_pass(model, g, regime)
        });
        // accumulate gradients, trainable-filtered, in deterministic order
        let mut acc: BTreeMap<String, Tensor> = BTreeMap::new();
        let (mut l_traj, mut l_conf, mut total) = (0.0, 0.0, 0.0);
        let n = batch.len() as f64;
        for res in results {
            let res = res?;
            for (name, g) in res.grads {
                if !regime.trainable(&name) {
                    continue;
                }
                let slot = acc
                    .entry(name)
                    .or_insert_with(|| Tensor::zeros(g.shape.clone()));
                for i in 0..g.data.len() {
                    slot.data[i] += g.data[i] / n;
                }
            }
            for (name, t) in res.stats {
                if regime.trainable(&name) {
                    let slot = model
                        .store
                        .buffers
                        .get_mut(&name)
                        .expect("stat update for unknown buffer");
                    for i in 0..slot.data.len() {
                        slot.data[i] =
                            (1.0 - BN_STAT_MOMENTUM) * slot.data[i] + BN_STAT_MOMENTUM * t.data[i];
                    }
                }
            }
            l_traj += res.l_traj / n;
            l_conf += res.l_conf / n;
            total += res.total / n;
        }
        adam.step(&mut model.store, &acc, &cfg, cosine_lr(&cfg, step));
        rows.push(LossRow { step, l_traj, l_conf, total });
    }
    Ok(TrainReport { rows })
}

pub fn write_loss_csv(path: &Path, rows: &[LossRow]) -> Result<()> {
    let mut out = String::from("step,l_traj,l_conf,total\n");
    for r in rows {
        out.push_str(&format!("{},{},{},{}\n", r.step, r.l_traj, r.l_conf, r.total));
    }
    std::fs::write(path, out)?;
    Ok(())
}

#[derive(Serialize, Deserialize)]
struct ManifestEntry {
    name: String,
    kind: String, // "param" | "buffer"
    shape: Vec<usize>,
    dtype: String, // always "f64", little-endian
    offset: usize, // element offset into the blob
}

#[derive(Serialize, Deserialize)]
struct Manifest {
    schema_version: u32,
    entries: Vec<ManifestEntry>,
}

/// Checkpoint layout: u64-LE manifest byte length, the JSON manifest, then a
/// packed little-endian f64 blob addressed by the manifest offsets.
pub fn save_checkpoint(path: &Path, store: &ParameterStore) -> Result<()> {
    let mut entries = Vec::new();
    let mut blob: Vec<u8> = Vec::new();
    let mut offset = 0usize;
    for (kind, map) in [("param", &store.params), ("buffer", &store.buffers)] {
        for (name, t) in map {
            entries.push(ManifestEntry {
                name: name.clone(),
                kind: kind.into(),
                shape: t.shape.clone(),
                dtype: "f64".into(),
                offset,
            });
            for x in &t.data {
                blob.extend_from_slice(&x.to_le_bytes());
            }
            offset += t.data.len();
        }
    }
    let manifest =
        serde_json::to_vec(&Manifest { schema_version: CHECKPOINT_SCHEMA_VERSION, entries })?;
    let mut f = std::fs::File::create(path)?;
    f.write_all(&(manifest.len() as u64).to_le_bytes())?;
    f.write_all(&manifest)?;
    f.write_all(&blob)?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<ParameterStore> {
    let mut f = std::fs::File::open(path)?;
    let mut len_buf = [0u8; 8];
    f.read_exact(&mut len_buf)
        .map_err(|_| Error::Checkpoint("file too short for manifest header".into()))?;
    let mlen = u64::from_le_bytes(len_buf) as usize;
    let mut mbuf = vec![0u8; mlen];
    f.read_exact(&mut mbuf)
        .map_err(|_| Error::Checkpoint("truncated manifest".into()))?;
    let manifest: Manifest = serde_json::from_slice(&mbuf)
        .map_err(|e| Error::Checkpoint(format!("bad manifest: {e}")))?;
    if manifest.schema_version != CHECKPOINT_SCHEMA_VERSION {
        return Err(Error::Checkpoint(format!(
            "checkpoint schema version {} (this build reads {})",
            manifest.schema_version, CHECKPOINT_SCHEMA_VERSION
        )));
    }
    let mut blob = Vec::new();
    f.read_to_end(&mut blob)?;
    let mut store = ParameterStore::new();
    for e in &manifest.entries {
        if e.dtype != "f64" {
            return Err(Error::Checkpoint(format!("unsupported dtype {}", e.dtype)));
        }
        let n: usize = e.shape.iter().product();
        let start = e.offset * 8;
        let end = start + n * 8;
        if end > blob.len() {
            return Err(Error::Checkpoint(format!("blob too short for entry {}", e.name)));
        }
        let data: Vec<f64> = blob[start..end]
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        let t = Tensor::new(e.shape.clone(), data);
        match e.kind.as_str() {
            "param" => {
                store.params.insert(e.name.clone(), t);
            }
            "buffer" => {
                store.buffers.insert(e.name.clone(), t);
            }
            other => return Err(Error::Checkpoint(format!("unknown entry kind {other}"))),
        }
    }
    Ok(store)
}

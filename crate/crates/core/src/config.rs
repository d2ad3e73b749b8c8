//! Flat key-value configuration for model, graph, and training settings.

use std::collections::BTreeSet;
use std::path::Path;

use crate::error::{Error, Result};
use crate::graph::Relation;

#[derive(Debug, Clone, PartialEq)]
pub struct Config {
    /// Scenario sampling rate in Hz (10 Hz is the benchmark layout).
    pub rate_hz: f64,
    /// Hidden feature width D; heads must divide it.
    pub d_model: usize,
    /// Attention heads H.
    pub heads: usize,
    /// Lane node sampling spacing in meters.
    pub lane_spacing: f64,
    /// Step/lane interaction radius in meters.
    pub step_lane_radius: f64,
    /// Step/step interaction radius in meters.
    pub step_step_radius: f64,
    /// Neighbor budget for the k-NN edge families.
    pub knn_k: usize,
    /// Orientation gate (degrees) for step/lane edges of vehicle-like agents.
    pub orientation_gate_deg: f64,
    /// Number of predicted modes K.
    pub n_modes: usize,
    /// Refinement iterations.
    pub refine_iterations: usize,
    /// Attention heads inside the refinement transformer convolution.
    pub refine_heads: usize,
    /// Trajectory-loss weight in the per-agent loss.
    pub loss_alpha: f64,
    /// Max-margin epsilon for the confidence loss.
    pub margin: f64,
    pub weight_focal: f64,
    pub weight_scored: f64,
    pub weight_unscored: f64,
    pub weight_fragment: f64,
    /// Auxiliary proposal-stage loss weight in the e2e regime (0 disables).
    pub aux_proposal_weight: f64,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
    pub batch_size: usize,
    pub steps: usize,
    /// Cosine learning-rate decay toward this floor fraction of the base lr.
    pub lr_floor: f64,
    /// Worker threads; 1 forces fully sequential execution.
    pub threads: usize,
    /// Scene-graph edge families to skip (ablation).
    pub removed_edges: BTreeSet<Relation>,
}

impl Default for Config {
    fn default() -> Self {
        Config {
            rate_hz: 10.0,
            d_model: 64,
            heads: 2,
            lane_spacing: 2.0,
            step_lane_radius: 7.0,
            step_step_radius: 100.0,
            knn_k: 5,
            orientation_gate_deg: 60.0,
            n_modes: 6,
            refine_iterations: 3,
            refine_heads: 2,
            loss_alpha: 1.0,
            margin: 0.2,
            weight_focal: 1.0,
            weight_scored: 0.5,
            weight_unscored: 0.2,
            weight_fragment: 0.0,
            aux_proposal_weight: 0.5,
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            adam_eps: 1e-8,
            batch_size: 4,
            steps: 500,
            lr_floor: 0.1,
            threads: 0,
            removed_edges: BTreeSet::new(),
        }
    }
}

impl Config {
    /// Small, fast settings used by unit tests: 2 Hz layout, narrow model.
    pub fn desk_test() -> Self {
        Config {
            rate_hz: 2.0,
            d_model: 32,
            heads: 2,
            ..Default::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.heads == 0 || self.d_model % self.heads != 0 {
            return Err(Error::Config(format!(
                "heads ({}) must divide d_model ({})",
                self.heads, self.d_model
            )));
        }
        if self.rate_hz <= 0.0 {
            return Err(Error::Config("rate_hz must be positive".into()));
        }
        if self.n_modes == 0 {
            return Err(Error::Config("n_modes must be at least 1".into()));
        }
        if self.refine_iterations == 0 {
            return Err(Error::Config("refine_iterations must be at least 1".into()));
        }
        for r in &self.removed_edges {
            if !Relation::REMOVABLE.contains(r) {
                return Err(Error::Config(format!(
                    "edge family {r:?} cannot be removed (not in the ablation space)"
                )));
            }
        }
        Ok(())
    }

    /// Parse `key = value` lines; `#` starts a comment. Unknown keys are errors.
    pub fn from_str_cfg(text: &str) -> Result<Self> {
        let mut cfg = Config::default();
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap().trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("line {}: expected key = value", lineno + 1)))?;
            let key = key.trim();
            let value = value.trim();
            cfg.set(key, value)?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn from_file(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        Self::from_str_cfg(&text)
    }

    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        fn f(v: &str) -> Result<f64> {
            v.parse().map_err(|_| Error::Config(format!("expected number, got {v}")))
        }
        fn u(v: &str) -> Result<usize> {
            v.parse().map_err(|_| Error::Config(format!("expected integer, got {v}")))
        }
        match key {
            "rate_hz" => self.rate_hz = f(value)?,
            "d_model" => self.d_model = u(value)?,
            "heads" => self.heads = u(value)?,
            "lane_spacing" => self.lane_spacing = f(value)?,
            "step_lane_radius" => self.step_lane_radius = f(value)?,
            "step_step_radius" => self.step_step_radius = f(value)?,
            "knn_k" => self.knn_k = u(value)?,
            "orientation_gate_deg" => self.orientation_gate_deg = f(value)?,
            "n_modes" => self.n_modes = u(value)?,
            "refine_iterations" => self.refine_iterations = u(value)?,
            "refine_heads" => self.refine_heads = u(value)?,
            "loss_alpha" => self.loss_alpha = f(value)?,
            "margin" => self.margin = f(value)?,
            "weight_focal" => self.weight_focal = f(value)?,
            "weight_scored" => self.weight_scored = f(value)?,
            "weight_unscored" => self.weight_unscored = f(value)?,
            "weight_fragment" => self.weight_fragment = f(value)?,
            "aux_proposal_weight" => self.aux_proposal_weight = f(value)?,
            "lr" => self.lr = f(value)?,
            "beta1" => self.beta1 = f(value)?,
            "beta2" => self.beta2 = f(value)?,
            "adam_eps" => self.adam_eps = f(value)?,
            "batch_size" => self.batch_size = u(value)?,
            "steps" => self.steps = u(value)?,
            "lr_floor" => self.lr_floor = f(value)?,
            "threads" => self.threads = u(value)?,
            "removed_edges" => {
                self.removed_edges = value
                    .split(',')
                    .filter(|s| !s.trim().is_empty())
                    .map(|s| {
                        Relation::parse(s.trim())
                            .ok_or_else(|| Error::Config(format!("unknown relation {s}")))
                    })
                    .collect::<Result<_>>()?;
            }
            other => return Err(Error::Config(format!("unknown config key {other}"))),
        }
        Ok(())
    }
}

//! Standard multi-modal forecasting metrics over the top-K most confident
//! modes: minADE, minFDE, miss rate (2 m endpoint threshold), and the
//! Brier-minFDE variant that penalizes low confidence on the best mode.

use std::path::Path;

use serde::Serialize;

use crate::error::{Error, Result};
use crate::forecaster::PredictionSet;
use crate::graph::HeteroGraph;
use crate::scenario::TrackCategory;
use crate::tape::Tape;

pub const MISS_THRESHOLD_M: f64 = 2.0;

/// One scored agent: per-mode confidences and trajectories plus the ground
/// truth, all in a common frame (the metrics are frame-invariant).
#[derive(Debug, Clone)]
pub struct EvalCase {
    pub confidences: Vec<f64>,
    pub trajectories: Vec<Vec<[f64; 2]>>,
    pub gt: Vec<[f64; 2]>,
}

#[derive(Debug, Clone, Serialize)]
pub struct Metrics {
    pub k: usize,
    pub min_ade: f64,
    pub min_fde: f64,
    pub miss_rate: f64,
    pub brier_min_fde: f64,
    pub n: usize,
}

/// Mode order for top-K selection: descending confidence, ties toward the
/// lower mode index.
pub fn top_k_modes(confidences: &[f64], k: usize) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..confidences.len()).collect();
    idx.sort_by(|&a, &b| {
        confidences[b].partial_cmp(&confidences[a]).unwrap().then(a.cmp(&b))
    });
    idx.truncate(k);
    idx
}

fn dist(a: [f64; 2], b: [f64; 2]) -> f64 {
    (a[0] - b[0]).hypot(a[1] - b[1])
}

pub fn evaluate(cases: &[EvalCase], k: usize) -> Result<Metrics> {
    if cases.is_empty() {
        return Err(Error::Eval("no agents to evaluate".into()));
    }
    let (mut ade, mut fde, mut miss, mut brier) = (0.0, 0.0, 0.0, 0.0);
    for (i, case) in cases.iter().enumerate() {
        if k > case.trajectories.len() {
            return Err(Error::Eval(format!(
                "K={k} exceeds the {} available modes for agent {i}",
                case.trajectories.len()
            )));
        }
        let t = case.gt.len();
        if case.trajectories.iter().any(|tr| tr.len() != t) {
            return Err(Error::Eval(format!(
                "agent {i}: prediction and ground-truth horizons disagree"
            )));
        }
        let top = top_k_modes(&case.confidences, k);
        let mut best_fde = f64::INFINITY;
        let mut best_ade = f64::INFINITY;
        let mut best_conf = 0.0;
        for &m in &top {
            let tr = &case.trajectories[m];
            let e = dist(tr[t - 1], case.gt[t - 1]);
            let a = tr.iter().zip(&case.gt).map(|(p, g)| dist(*p, *g)).sum::<f64>() / t as f64;
            if e < best_fde {
                best_fde = e;
                best_conf = case.confidences[m];
            }
            if a < best_ade {
                best_ade = a;
            }
        }
        ade += best_ade;
        fde += best_fde;
        if best_fde > MISS_THRESHOLD_M {
            miss += 1.0;
        }
        brier += best_fde + (1.0 - best_conf).powi(2);
    }
    let n = cases.len() as f64;
    Ok(Metrics {
        k,
        min_ade: ade / n,
        min_fde: fde / n,
        miss_rate: miss / n,
        brier_min_fde: brier / n,
        n: cases.len(),
    })
}

/// Extract the focal agents of a scene as evaluation cases, in the shared
/// normalization frame.
pub fn focal_cases(tape: &Tape, graph: &HeteroGraph, set: &PredictionSet) -> Vec<EvalCase> {
    let coords = tape.value(set.coords);
    let conf = tape.value(set.confidences);
    let (k, t) = (set.k, set.t_fut);
    graph
        .agents
        .iter()
        .enumerate()
        .filter(|(_, m)| m.category == TrackCategory::Focal)
        .map(|(a, _)| {
            let confidences = (0..k).map(|m| conf.data[a * k + m]).collect();
            let trajectories = (0..k)
                .map(|m| {
                    (0..t)
                        .map(|i| {
                            let r = (a * k + m) * t + i;
                            [coords.data[r * 2], coords.data[r * 2 + 1]]
                        })
                        .collect()
                })
                .collect();
            let gt_t = &graph.gt_future[a];
            let gt = (0..t).map(|i| [gt_t.data[i * 2], gt_t.data[i * 2 + 1]]).collect();
            EvalCase { confidences, trajectories, gt }
        })
        .collect()
}

pub fn write_metrics_csv(path: &Path, rows: &[Metrics]) -> Result<()> {
    let mut out = String::from("K,minADE,minFDE,MR,brier_minFDE,n\n");
    for m in rows {
        out.push_str(&format!(
            "{},{},{},{},{},{}\n",
            m.k, m.min_ade, m.min_fde, m.miss_rate, m.brier_min_fde, m.n
        ));
    }
    std::fs::write(path, out)?;
    Ok(())
}

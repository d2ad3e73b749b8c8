//! Training losses: winner-takes-all smooth-L1 trajectory regression and a
//! max-margin confidence loss on pre-softmax logits, combined per agent with
//! category weights.

use crate::config::Config;
use crate::error::{Error, Result};
use crate::forecaster::PredictionSet;
use crate::graph::HeteroGraph;
use crate::scenario::TrackCategory;
use crate::tape::{Tape, Var};

pub fn category_weight(cfg: &Config, c: TrackCategory) -> f64 {
    match c {
        TrackCategory::Focal => cfg.weight_focal,
        TrackCategory::Scored => cfg.weight_scored,
        TrackCategory::Unscored => cfg.weight_unscored,
        TrackCategory::Fragment => cfg.weight_fragment,
    }
}

/// Winner-takes-all mode per agent: smallest final-point displacement to the
/// ground truth, ties resolved toward the lower mode index.
pub fn best_modes(tape: &Tape, set: &PredictionSet, graph: &HeteroGraph) -> Vec<usize> {
    let coords = tape.value(set.coords);
    let (k, t) = (set.k, set.t_fut);
    (0..set.n_agents)
        .map(|a| {
            let gt = &graph.gt_future[a];
            let ge = [gt.data[(t - 1) * 2], gt.data[(t - 1) * 2 + 1]];
            let mut best = 0;
            let mut best_d = f64::INFINITY;
            for m in 0..k {
                let r = (a * k + m) * t + (t - 1);
                let d = (coords.data[r * 2] - ge[0]).hypot(coords.data[r * 2 + 1] - ge[1]);
                if d < best_d {
                    best_d = d;
                    best = m;
                }
            }
            best
        })
        .collect()
}

/// Per-agent smooth-L1 trajectory loss on the winning mode, averaged over
/// every future point and both coordinates.
pub fn trajectory_loss(
    tape: &mut Tape,
    set: &PredictionSet,
    graph: &HeteroGraph,
    best: &[usize],
) -> Vec<Var> {
    (0..set.n_agents)
        .map(|a| {
            let rows: Vec<usize> = set.traj_rows(a, best[a]).collect();
            let pred = tape.gather_rows(set.coords, &rows);
            let gt = tape.leaf(graph.gt_future[a].clone());
            let diff = tape.sub(pred, gt);
            let h = tape.huber(diff);
            tape.mean_all(h)
        })
        .collect()
}

/// Per-agent max-margin confidence loss on pre-softmax logits: the mean over
/// non-winning modes of `max(0, l_m − l_best + margin)`.
pub fn confidence_loss(
    tape: &mut Tape,
    set: &PredictionSet,
    best: &[usize],
    margin: f64,
) -> Vec<Var> {
    let k = set.k;
    (0..set.n_agents)
        .map(|a| {
            let others: Vec<usize> =
                (0..k).filter(|&m| m != best[a]).map(|m| set.mode_row(a, m)).collect();
            if others.is_empty() {
                return tape.leaf(crate::tensor::Tensor::zeros(vec![1]));
            }
            let best_rep = vec![set.mode_row(a, best[a]); others.len()];
            let lo = tape.gather_rows(set.logits, &others);
            let lb = tape.gather_rows(set.logits, &best_rep);
            let diff = tape.sub(lo, lb);
            let marg = tape.add_scalar(diff, margin);
            let hinge = tape.relu(marg);
            tape.mean_all(hinge)
        })
        .collect()
}

/// Scalar loss terms from one scene.
pub struct SceneLoss {
    pub total: Var,
    pub traj: Var,
    pub conf: Var,
}

/// Category-weighted scene loss: `Σ_a w(a) · (L_conf + α·L_traj)`. The
/// returned `traj`/`conf` terms carry the same weights so they sum to
/// `total` when `α = 1`.
pub fn scene_loss(
    tape: &mut Tape,
    cfg: &Config,
    set: &PredictionSet,
    graph: &HeteroGraph,
) -> Result<SceneLoss> {
    if set.n_agents != graph.n_agents() || graph.gt_future.len() != set.n_agents {
        return Err(Error::Eval("prediction set and scene disagree on agent count".into()));
    }
    let best = best_modes(tape, set, graph);
    let traj_terms = trajectory_loss(tape, set, graph, &best);
    let conf_terms = confidence_loss(tape, set, &best, cfg.margin);
    let mut traj_acc: Option<Var> = None;
    let mut conf_acc: Option<Var> = None;
    let add_weighted = |tape: &mut Tape, acc: &mut Option<Var>, term: Var, w: f64| {
        let scaled = tape.scale(term, w);
        *acc = Some(match *acc {
            Some(prev) => tape.add(prev, scaled),
            None => scaled,
        });
    };
    for (a, meta) in graph.agents.iter().enumerate() {
        let w = category_weight(cfg, meta.category);
        add_weighted(tape, &mut traj_acc, traj_terms[a], w);
        add_weighted(tape, &mut conf_acc, conf_terms[a], w);
    }
    let traj_w = traj_acc.expect("at least one agent");
    let conf_w = conf_acc.expect("at least one agent");
    let traj = tape.scale(traj_w, cfg.loss_alpha);
    let total = tape.add(conf_w, traj);
    Ok(SceneLoss { total, traj, conf: conf_w })
}

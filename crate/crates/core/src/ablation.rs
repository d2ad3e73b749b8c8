//! Edge-removal ablation: retrain and re-evaluate the model with chosen
//! scene-graph relation families removed. Only the scene graph is touched —
//! the refinement module always rebuilds its own dynamic edges.

use std::collections::BTreeSet;
use std::path::Path;

use serde::Serialize;

use crate::config::Config;
use crate::error::{Error, Result};
use crate::graph::{assemble_scene_graph, Relation};
use crate::metrics::{evaluate, focal_cases, Metrics};
use crate::model::Model;
use crate::nn::Mode;
use crate::scenario::Scenario;
use crate::tape::Tape;
use crate::train::{train, Regime};

#[derive(Debug, Clone, Serialize)]
pub struct AblationRow {
    /// "+"-joined relation names, or "none" for the full graph.
    pub removed: String,
    pub metrics: Metrics,
}

pub fn removal_label(set: &BTreeSet<Relation>) -> String {
    if set.is_empty() {
        "none".into()
    } else {
        set.iter().map(|r| r.name()).collect::<Vec<_>>().join("+")
    }
}

/// Only the optional relation families may be removed; the lane-lane
/// connectivity and the step→trajectory accumulation are load-bearing.
pub fn validate_removal_set(set: &BTreeSet<Relation>) -> Result<()> {
    for r in set {
        if !Relation::REMOVABLE.contains(r) {
            return Err(Error::Config(format!(
                "relation {} cannot be removed (removable: {})",
                r.name(),
                Relation::REMOVABLE.iter().map(|r| r.name()).collect::<Vec<_>>().join(", ")
            )));
        }
    }
    Ok(())
}

/// Train and evaluate one model per removal set. Every variant uses the same
/// seed, scenarios, and schedule, so rows differ only by the removed edges.
/// `eval_mode` picks the normalization for the evaluation forward pass:
/// `Mode::Eval` (running statistics) for held-out data, `Mode::Train`
/// (scene-as-batch statistics) when measuring fit on the training scenes
/// themselves, where tiny per-scene batches make running statistics
/// unrepresentative.
pub fn run_ablation(
    base: &Config,
    sets: &[BTreeSet<Relation>],
    train_scenarios: &[Scenario],
    eval_scenarios: &[Scenario],
    regime: Regime,
    seed: u64,
    parallel: bool,
    eval_mode: Mode,
) -> Result<Vec<AblationRow>> {
    let mut rows = Vec::with_capacity(sets.len());
    for set in sets {
        validate_removal_set(set)?;
        let mut cfg = base.clone();
        cfg.removed_edges = set.clone();
        cfg.validate()?;
        let train_graphs = train_scenarios
            .iter()
            .map(|sc| assemble_scene_graph(sc, &cfg))
            .collect::<Result<Vec<_>>>()?;
        let eval_graphs = eval_scenarios
            .iter()
            .map(|sc| assemble_scene_graph(sc, &cfg))
            .collect::<Result<Vec<_>>>()?;
        let mut model = Model::new(&cfg, seed);
        train(&mut model, &train_graphs, regime, parallel)?;
        let mut cases = Vec::new();
        for g in &eval_graphs {
            let mut tape = Tape::new();
            let out = model.forward(&mut tape, g, eval_mode, regime != Regime::None)?;
            cases.extend(focal_cases(&tape, g, out.final_set()));
        }
        let metrics = evaluate(&cases, cfg.n_modes)?;
        rows.push(AblationRow { removed: removal_label(set), metrics });
    }
    Ok(rows)
}

pub fn write_ablation_csv(path: &Path, rows: &[AblationRow]) -> Result<()> {
    let mut out = String::from("removed,K,minADE,minFDE,MR,brier_minFDE,n\n");
    for r in rows {
        let m = &r.metrics;
        out.push_str(&format!(
            "{},{},{},{},{},{},{}\n",
            r.removed, m.k, m.min_ade, m.min_fde, m.miss_rate, m.brier_min_fde, m.n
        ));
    }
    std::fs::write(path, out)?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::generator::{generate_synthetic, ScenarioKind};
    use crate::scenario::timestep_layout;

    #[test]
    fn rejects_structural_relations() {
        for bad in [Relation::LaneSucc, Relation::LanePred, Relation::LaneLeft, Relation::LaneRight, Relation::StepToTraj] {
            let set: BTreeSet<Relation> = [bad].into();
            assert!(matches!(validate_removal_set(&set), Err(Error::Config(_))), "{}", bad.name());
        }
        let ok: BTreeSet<Relation> = Relation::REMOVABLE.iter().copied().collect();
        validate_removal_set(&ok).unwrap();
    }

    #[test]
    fn rows_cover_every_requested_configuration() {
        let cfg = Config { d_model: 8, steps: 2, batch_size: 1, ..Config::desk_test() };
        let layout = timestep_layout(cfg.rate_hz).unwrap();
        let train_sc: Vec<Scenario> =
            (0..2).map(|i| generate_synthetic(ScenarioKind::Curve, 2, 40 + i, &layout)).collect();
        let eval_sc: Vec<Scenario> =
            (0..2).map(|i| generate_synthetic(ScenarioKind::Curve, 2, 50 + i, &layout)).collect();
        let sets: Vec<BTreeSet<Relation>> = vec![
            BTreeSet::new(),
            [Relation::StepToStep].into(),
            [Relation::LaneToStep, Relation::StepToLane].into(),
        ];
        let rows =
            run_ablation(&cfg, &sets, &train_sc, &eval_sc, Regime::None, 7, false, Mode::Eval).unwrap();
        assert_eq!(rows.len(), 3);
        assert_eq!(rows[0].removed, "none");
        assert_eq!(rows[1].removed, "step_to_step");
        assert_eq!(rows[2].removed, "lane_to_step+step_to_lane");
        for r in &rows {
            assert!(r.metrics.n > 0);
            assert!(r.metrics.min_ade.is_finite());
        }
    }

    #[test]
    fn removal_changes_the_model_output() {
        // the same seed with different graphs must give different metrics
        let cfg = Config { d_model: 8, steps: 3, batch_size: 1, ..Config::desk_test() };
        let layout = timestep_layout(cfg.rate_hz).unwrap();
        let scs: Vec<Scenario> =
            (0..2).map(|i| generate_synthetic(ScenarioKind::Curve, 3, 60 + i, &layout)).collect();
        let sets: Vec<BTreeSet<Relation>> = vec![
            BTreeSet::new(),
            Relation::REMOVABLE.iter().copied().collect(),
        ];
        let rows = run_ablation(&cfg, &sets, &scs, &scs, Regime::None, 7, false, Mode::Eval).unwrap();
        assert_ne!(
            rows[0].metrics.brier_min_fde.to_bits(),
            rows[1].metrics.brier_min_fde.to_bits()
        );
    }
}

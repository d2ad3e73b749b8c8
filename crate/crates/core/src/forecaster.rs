//! Multimodal trajectory heads and confidence rating. Each agent type owns K
//! trajectory heads and a confidence head; trajectories decode as cumulative
//! displacements from the agent's last observed position, so zero-initialized
//! output layers start every mode exactly at that position.

use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::graph::HeteroGraph;
use crate::nn::{Linear, MlpBn, Mode, ParameterStore};
use crate::scenario::AgentType;
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

/// Per-scene multimodal predictions, all rows agent-major.
pub struct PredictionSet {
    pub n_agents: usize,
    pub k: usize,
    pub t_fut: usize,
    /// Frame-relative points, `[(A·K·T_fut) × 2]`, grouped agent, mode, time.
    pub coords: Var,
    /// Mode auxiliary features, `[(A·K) × D]`.
    pub aux: Var,
    /// Pre-softmax confidence logits, `[(A·K) × 1]`.
    pub logits: Var,
    /// Softmax confidences per agent, `[(A·K) × 1]`.
    pub confidences: Var,
}

impl PredictionSet {
    /// Row range of (agent, mode) in `coords`.
    pub fn traj_rows(&self, agent: usize, mode: usize) -> std::ops::Range<usize> {
        let start = (agent * self.k + mode) * self.t_fut;
        start..start + self.t_fut
    }

    pub fn mode_row(&self, agent: usize, mode: usize) -> usize {
        agent * self.k + mode
    }
}

/// Five-layer confidence head over (final feature, mode aux feature) pairs,
/// one parameter set per agent type. Reused verbatim by the refinement stage
/// under its own name prefix.
pub struct ConfidenceHead {
    pub d: usize,
    mlps: Vec<MlpBn>,
    outs: Vec<Linear>,
}

impl ConfidenceHead {
    pub fn new(name: &str, d: usize) -> Self {
        let mut mlps = Vec::new();
        let mut outs = Vec::new();
        for t in AgentType::ALL {
            let tag = t.name();
            mlps.push(MlpBn::new(format!("{name}.{tag}"), &[2 * d, d, d, d, d], true, true));
            outs.push(Linear::new(format!("{name}.{tag}.out"), d, 1));
        }
        ConfidenceHead { d, mlps, outs }
    }

    pub fn init(&self, store: &mut ParameterStore, rng: &mut ChaCha8Rng) {
        for (m, o) in self.mlps.iter().zip(&self.outs) {
            m.init(store, rng);
            o.init_zero(store);
        }
    }

    /// `pairs` is `[(A·K) × 2D]` agent-major; returns per-agent softmaxed
    /// confidences and the raw logits, both `[(A·K) × 1]`.
    pub fn forward(
        &self,
        tape: &mut Tape,
        store: &ParameterStore,
        pairs: Var,
        agent_types: &[AgentType],
        k: usize,
        mode: Mode,
    ) -> Result<(Var, Var)> {
        let n_agents = agent_types.len();
        if tape.value(pairs).rows() != n_agents * k {
            return Err(Error::DimensionMismatch {
                op: "confidence head pairs".into(),
                left: tape.value(pairs).shape.clone(),
                right: vec![n_agents * k, 2 * self.d],
            });
        }
        let mut parts = Vec::new();
        let mut orig_rows: Vec<usize> = Vec::new();
        for (ti, t) in AgentType::ALL.iter().enumerate() {
            let rows: Vec<usize> = (0..n_agents)
                .filter(|&a| agent_types[a] == *t)
                .flat_map(|a| (0..k).map(move |m| a * k + m))
                .collect();
            if rows.is_empty() {
                continue;
            }
            let x = tape.gather_rows(pairs, &rows);
            let h = self.mlps[ti].forward(tape, store, x, mode);
            let l = self.outs[ti].forward(tape, store, h);
            parts.push(l);
            orig_rows.extend_from_slice(&rows);
        }
        let stacked = tape.concat_rows(&parts);
        // restore agent-major order
        let mut position = vec![0usize; n_agents * k];
        for (pos, &r) in orig_rows.iter().enumerate() {
            position[r] = pos;
        }
        let logits = tape.gather_rows(stacked, &position);
        let segments: Vec<usize> = (0..n_agents * k).map(|r| r / k).collect();
        let conf = tape.segment_softmax(logits, &segments);
        Ok((conf, logits))
    }
}

pub struct Forecaster {
    pub d: usize,
    pub k: usize,
    pub t_fut: usize,
    /// `heads[type][mode]`: 6 hidden layers plus the two output projections.
    heads: Vec<Vec<(MlpBn, Linear, Linear)>>,
    confidence: ConfidenceHead,
}

impl Forecaster {
    pub fn new(name: &str, d: usize, k: usize, t_fut: usize) -> Self {
        let mut heads = Vec::new();
        for t in AgentType::ALL {
            let tag = t.name();
            let mut per_mode = Vec::new();
            for m in 0..k {
                let base = format!("{name}.{tag}.m{m}");
                per_mode.push((
                    MlpBn::new(format!("{base}.body"), &[d, d, d, d, d, d, d], true, true),
                    Linear::new(format!("{base}.coords"), d, 2 * t_fut),
                    Linear::new(format!("{base}.aux"), d, d),
                ));
            }
            heads.push(per_mode);
        }
        Forecaster { d, k, t_fut, heads, confidence: ConfidenceHead::new(&format!("{name}.conf"), d) }
    }

    pub fn init(&self, store: &mut ParameterStore, rng: &mut ChaCha8Rng) {
        for per_mode in &self.heads {
            for (body, coords, aux) in per_mode {
                body.init(store, rng);
                coords.init_zero(store);
                aux.init_zero(store);
            }
        }
        self.confidence.init(store, rng);
    }

    /// Run every agent through its type's K heads and rate confidences.
    /// `final_feats` is `[N_agents × D]`.
    pub fn forward(
        &self,
        tape: &mut Tape,
        store: &ParameterStore,
        graph: &HeteroGraph,
        final_feats: Var,
        mode: Mode,
    ) -> Result<PredictionSet> {
        let n_agents = graph.n_agents();
        if tape.value(final_feats).rows() != n_agents {
            return Err(Error::DimensionMismatch {
                op: "forecaster final features".into(),
                left: tape.value(final_feats).shape.clone(),
                right: vec![n_agents, self.d],
            });
        }
        let agent_types: Vec<AgentType> = graph.agents.iter().map(|a| a.agent_type).collect();

        // per (type, mode) batched head passes; remember each agent's row
        // inside its type group
        let mut group_rows: Vec<Vec<usize>> = vec![Vec::new(); AgentType::ALL.len()];
        let mut pos_in_group = vec![0usize; n_agents];
        for (a, t) in agent_types.iter().enumerate() {
            let g = &mut group_rows[t.index()];
            pos_in_group[a] = g.len();
            g.push(a);
        }
        // outputs[type][mode] = (displacements [N_t × 2T], aux [N_t × D])
        let mut outputs: Vec<Vec<Option<(Var, Var)>>> =
            vec![vec![None; self.k]; AgentType::ALL.len()];
        for (ti, rows) in group_rows.iter().enumerate() {
            if rows.is_empty() {
                continue;
            }
            let x = tape.gather_rows(final_feats, rows);
            for m in 0..self.k {
                let (body, coords, aux) = &self.heads[ti][m];
                let h = body.forward(tape, store, x, mode);
                let disp = coords.forward(tape, store, h);
                let av = aux.forward(tape, store, h);
                outputs[ti][m] = Some((disp, av));
            }
        }

        // decode trajectories agent-major: cumulative displacements from the
        // last observed position
        let mut traj_parts = Vec::with_capacity(n_agents * self.k);
        let mut aux_parts = Vec::with_capacity(n_agents * self.k);
        for (a, t) in agent_types.iter().enumerate() {
            let origin = tape.leaf(Tensor::new(
                vec![2],
                graph.agents[a].last_obs_pos.to_vec(),
            ));
            for m in 0..self.k {
                let (disp, av) = outputs[t.index()][m].as_ref().unwrap();
                let row = tape.gather_rows(*disp, &[pos_in_group[a]]);
                let steps = tape.reshape(row, vec![self.t_fut, 2]);
                let cum = tape.cumsum_rows(steps);
                let pts = tape.add_row(cum, origin);
                traj_parts.push(pts);
                let aux_row = tape.gather_rows(*av, &[pos_in_group[a]]);
                aux_parts.push(aux_row);
            }
        }
        let coords = tape.concat_rows(&traj_parts);
        let aux = tape.concat_rows(&aux_parts);

        // confidence input: (final feature, aux) per mode
        let rep: Vec<usize> = (0..n_agents).flat_map(|a| std::iter::repeat(a).take(self.k)).collect();
        let final_rep = tape.gather_rows(final_feats, &rep);
        let pairs = tape.concat_cols(&[final_rep, aux]);
        let (confidences, logits) =
            self.confidence
                .forward(tape, store, pairs, &agent_types, self.k, mode)?;

        Ok(PredictionSet {
            n_agents,
            k: self.k,
            t_fut: self.t_fut,
            coords,
            aux,
            logits,
            confidences,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::Config;
    use crate::generator::{generate_synthetic, ScenarioKind};
    use crate::graph::assemble_scene_graph;
    use crate::nn::xavier_uniform;
    use crate::scenario::timestep_layout;
    use rand::SeedableRng;

    fn setup(seed: u64) -> (Forecaster, ParameterStore, HeteroGraph, Tensor) {
        let cfg = Config { d_model: 8, ..Config::desk_test() };
        let layout = timestep_layout(cfg.rate_hz).unwrap();
        let sc = generate_synthetic(ScenarioKind::Straight, 4, seed, &layout);
        let g = assemble_scene_graph(&sc, &cfg).unwrap();
        let fc = Forecaster::new("fc", 8, 6, g.t_fut);
        let mut store = ParameterStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        fc.init(&mut store, &mut rng);
        let feats = xavier_uniform(&mut rng, g.n_agents(), 8);
        (fc, store, g, feats)
    }

    #[test]
    fn shapes_and_simplex() {
        let (fc, store, g, feats) = setup(1);
        let mut tape = Tape::new();
        let x = tape.leaf(feats);
        let p = fc.forward(&mut tape, &store, &g, x, Mode::Eval).unwrap();
        let a = g.n_agents();
        assert_eq!(tape.value(p.coords).shape, vec![a * 6 * g.t_fut, 2]);
        assert_eq!(tape.value(p.aux).shape, vec![a * 6, 8]);
        assert_eq!(tape.value(p.confidences).shape, vec![a * 6, 1]);
        let conf = &tape.value(p.confidences).data;
        for agent in 0..a {
            let s: f64 = conf[agent * 6..(agent + 1) * 6].iter().sum();
            assert!((s - 1.0).abs() < 1e-9, "agent {agent}: {s}");
            assert!(conf[agent * 6..(agent + 1) * 6].iter().all(|&c| c >= 0.0));
        }
    }

    #[test]
    fn zero_init_starts_every_mode_at_last_observed_position() {
        let (fc, store, g, feats) = setup(2);
        let mut tape = Tape::new();
        let x = tape.leaf(feats);
        let p = fc.forward(&mut tape, &store, &g, x, Mode::Eval).unwrap();
        let coords = tape.value(p.coords);
        for a in 0..g.n_agents() {
            let origin = g.agents[a].last_obs_pos;
            for m in 0..6 {
                for r in p.traj_rows(a, m) {
                    assert_eq!(coords.data[r * 2], origin[0]);
                    assert_eq!(coords.data[r * 2 + 1], origin[1]);
                }
            }
        }
        // zero-init confidence output layer means uniform confidences
        let conf = &tape.value(p.confidences).data;
        assert!(conf.iter().all(|&c| (c - 1.0 / 6.0).abs() < 1e-12));
    }

    #[test]
    fn mode_routing_isolates_agent_types() {
        // scenario contains vehicles and a pedestrian; perturbing a pedestrian
        // head must leave vehicle outputs untouched
        let (fc, store, g, feats) = setup(3);
        let has_ped = g.agents.iter().any(|a| a.agent_type == AgentType::Pedestrian);
        assert!(has_ped, "test scenario should include a pedestrian");
        let run = |store: &ParameterStore| {
            let mut tape = Tape::new();
            let x = tape.leaf(feats.clone());
            let p = fc.forward(&mut tape, &store, &g, x, Mode::Eval).unwrap();
            (tape.value(p.coords).clone(), tape.value(p.confidences).clone())
        };
        let (c0, f0) = run(&store);
        let mut store2 = store.clone();
        let pname = "fc.pedestrian.m0.coords.w";
        let shape = store2.get(pname).shape.clone();
        let n: usize = shape.iter().product();
        store2.insert(pname, Tensor::new(shape, vec![0.33; n]));
        let (c1, f1) = run(&store2);
        for (a, meta) in g.agents.iter().enumerate() {
            for m in 0..6 {
                let start = (a * 6 + m) * g.t_fut;
                let changed = (start..start + g.t_fut)
                    .any(|r| c0.data[r * 2] != c1.data[r * 2] || c0.data[r * 2 + 1] != c1.data[r * 2 + 1]);
                if meta.agent_type == AgentType::Pedestrian && m == 0 {
                    assert!(changed, "pedestrian agent {a} mode 0 should move");
                } else if meta.agent_type != AgentType::Pedestrian {
                    assert!(!changed, "agent {a} ({:?}) mode {m} moved", meta.agent_type);
                }
            }
        }
        // vehicle confidences also unchanged
        for (a, meta) in g.agents.iter().enumerate() {
            if meta.agent_type != AgentType::Pedestrian {
                for m in 0..6 {
                    assert_eq!(f0.data[a * 6 + m], f1.data[a * 6 + m]);
                }
            }
        }
    }

    #[test]
    fn confidence_gradients_match_finite_differences() {
        let (fc, store, g, feats) = setup(4);
        // move off the zero-init saddle so gradients are informative
        let mut store = store;
        let mut rng = ChaCha8Rng::seed_from_u64(99);
        for t in AgentType::ALL {
            let mut randomize = |name: String| {
                let shape = store.get(&name).shape.clone();
                store.insert(&name, xavier_uniform(&mut rng, shape[0], shape[1]));
            };
            randomize(format!("fc.conf.{}.out.w", t.name()));
            // distinct aux features per mode, otherwise every mode's logit is
            // identical and the softmax is parameter-invariant
            for m in 0..6 {
                randomize(format!("fc.{}.m{m}.aux.w", t.name()));
            }
        }
        let eval = |store: &ParameterStore| {
            let mut tape = Tape::new();
            let x = tape.leaf(feats.clone());
            let p = fc.forward(&mut tape, &store, &g, x, Mode::Eval).unwrap();
            // weighted sum to exercise the softmax jacobian
            let w = tape.leaf(Tensor::new(
                vec![tape.value(p.confidences).rows(), 1],
                (0..tape.value(p.confidences).rows()).map(|i| (i % 5) as f64 * 0.3).collect(),
            ));
            let prod = tape.mul(p.confidences, w);
            let s = tape.sum_all(prod);
            tape.value(s).data[0]
        };
        let mut tape = Tape::new();
        let x = tape.leaf(feats.clone());
        let p = fc.forward(&mut tape, &store, &g, x, Mode::Eval).unwrap();
        let w = tape.leaf(Tensor::new(
            vec![tape.value(p.confidences).rows(), 1],
            (0..tape.value(p.confidences).rows()).map(|i| (i % 5) as f64 * 0.3).collect(),
        ));
        let prod = tape.mul(p.confidences, w);
        let root = tape.sum_all(prod);
        let grads = tape.backward(root);
        let mut checked = 0;
        for (name, grad) in tape.param_grads(&grads) {
            if !name.contains(".conf.") {
                continue;
            }
            for &i in &[0usize, grad.data.len() / 2] {
                let base = store.get(&name).data.clone();
                let fd = crate::tape::central_difference(&base, i, 1e-5, |pert| {
                    let mut s2 = store.clone();
                    let shape = s2.get(&name).shape.clone();
                    s2.insert(&name, Tensor::new(shape, pert.to_vec()));
                    eval(&s2)
                });
                let an = grad.data[i];
                if fd.abs() > 1e-9 || an.abs() > 1e-9 {
                    assert!(crate::tape::rel_err(an, fd) < 1e-3, "{name}[{i}]: {an} vs {fd}");
                    checked += 1;
                }
            }
        }
        assert!(checked >= 3, "only {checked} checks ran");
    }
}

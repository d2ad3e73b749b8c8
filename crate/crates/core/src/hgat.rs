//! Relation-typed graph attention layer over the heterogeneous scene graph.
//!
//! Per relation and head, attention logits come from a learned vector applied
//! to the activated concatenation of target, neighbor, and edge projections.
//! Weights are normalized jointly across every relation targeting a node, so
//! a node's incoming mass over all relations sums to one per head.

use std::collections::BTreeMap;

use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::graph::{EdgeTable, HeteroGraph, NodeType, Relation};
use crate::nn::{xavier_uniform, ParameterStore, LEAKY_SLOPE};
use crate::tape::{Tape, Var};

/// One attention weight, as exposed by the introspection dump.
#[derive(Debug, Clone, Serialize)]
pub struct AttentionRecord {
    pub layer: String,
    pub head: usize,
    pub relation: &'static str,
    pub src_type: NodeType,
    pub src: usize,
    pub dst_type: NodeType,
    pub dst: usize,
    pub alpha: f64,
}

fn type_tag(t: NodeType) -> &'static str {
    match t {
        NodeType::Lane => "lane",
        NodeType::TrajectoryStep => "step",
        NodeType::FullTrajectory => "traj",
    }
}

#[derive(Debug, Clone)]
pub struct HgatLayer {
    pub name: String,
    pub d: usize,
    pub heads: usize,
    pub relations: Vec<Relation>,
}

impl HgatLayer {
    pub fn new(name: impl Into<String>, d: usize, heads: usize, relations: &[Relation]) -> Self {
        assert!(heads > 0 && d % heads == 0, "heads must divide d");
        HgatLayer { name: name.into(), d, heads, relations: relations.to_vec() }
    }

    fn d_head(&self) -> usize {
        self.d / self.heads
    }

    /// Node types this layer updates (targets of its relations).
    pub fn target_types(&self) -> Vec<NodeType> {
        let mut out: Vec<NodeType> = Vec::new();
        for r in &self.relations {
            let (_, t) = r.endpoints();
            if !out.contains(&t) {
                out.push(t);
            }
        }
        out.sort();
        out
    }

    fn pname(&self, r: Relation, h: usize, which: &str) -> String {
        format!("{}.{}.h{}.{}", self.name, r.name(), h, which)
    }

    fn res_name(&self, t: NodeType, which: &str) -> String {
        format!("{}.res.{}.{}", self.name, type_tag(t), which)
    }

    pub fn init(&self, store: &mut ParameterStore, rng: &mut ChaCha8Rng) {
        let dh = self.d_head();
        for &r in &self.relations {
            let edge_dim = r.edge_feat_dim();
            for h in 0..self.heads {
                store.insert(&self.pname(r, h, "w_s"), xavier_uniform(rng, self.d, dh));
                store.insert(&self.pname(r, h, "w_n"), xavier_uniform(rng, self.d, dh));
                store.insert(&self.pname(r, h, "w_e"), xavier_uniform(rng, edge_dim, dh));
                store.insert(&self.pname(r, h, "a"), xavier_uniform(rng, 3 * dh, 1));
            }
        }
        for t in self.target_types() {
            store.insert(&self.res_name(t, "w"), xavier_uniform(rng, self.d, self.d));
            store.insert(
                &self.res_name(t, "b"),
                crate::tensor::Tensor::zeros(vec![self.d]),
            );
        }
    }

    /// One message-passing step. `inputs` maps node type to its `[N_t × D]`
    /// feature matrix; node types not targeted by any relation pass through
    /// untouched. When `attention` is given, every normalized weight is
    /// recorded.
    pub fn forward(
        &self,
        tape: &mut Tape,
        store: &ParameterStore,
        inputs: &BTreeMap<NodeType, Var>,
        graph: &HeteroGraph,
        mut attention: Option<&mut Vec<AttentionRecord>>,
    ) -> Result<BTreeMap<NodeType, Var>> {
        for (&t, &x) in inputs {
            if tape.value(x).cols() != self.d {
                return Err(Error::DimensionMismatch {
                    op: format!("hgat layer {} input {}", self.name, type_tag(t)),
                    left: tape.value(x).shape.clone(),
                    right: vec![tape.value(x).rows(), self.d],
                });
            }
        }
        let mut out = BTreeMap::new();
        for (&t, &x) in inputs {
            out.insert(t, x);
        }
        for dst_type in self.target_types() {
            let Some(&x_dst) = inputs.get(&dst_type) else { continue };
            let n_dst = tape.value(x_dst).rows();
            // relations feeding this node type, with their edge tables
            let active: Vec<(Relation, &EdgeTable)> = self
                .relations
                .iter()
                .filter(|r| r.endpoints().1 == dst_type)
                .map(|&r| (r, graph.edge(r)))
                .filter(|(_, e)| !e.is_empty())
                .filter(|(r, _)| inputs.contains_key(&r.endpoints().0))
                .collect();

            let mut head_outputs = Vec::with_capacity(self.heads);
            for h in 0..self.heads {
                let mut logits_parts = Vec::new();
                let mut msg_parts = Vec::new();
                let mut segments: Vec<usize> = Vec::new();
                let mut edge_ids: Vec<(Relation, usize, usize)> = Vec::new();
                for &(r, table) in &active {
                    let (src_type, _) = r.endpoints();
                    let x_src = inputs[&src_type];
                    let src_rows = tape.gather_rows(x_src, &table.src);
                    let dst_rows = tape.gather_rows(x_dst, &table.dst);
                    let e_feat = tape.leaf(table.features.clone());
                    let w_s = tape.param(&self.pname(r, h, "w_s"), store.get(&self.pname(r, h, "w_s")));
                    let w_n = tape.param(&self.pname(r, h, "w_n"), store.get(&self.pname(r, h, "w_n")));
                    let w_e = tape.param(&self.pname(r, h, "w_e"), store.get(&self.pname(r, h, "w_e")));
                    let a = tape.param(&self.pname(r, h, "a"), store.get(&self.pname(r, h, "a")));
                    let ps = tape.matmul(dst_rows, w_s);
                    let pn = tape.matmul(src_rows, w_n);
                    let pe = tape.matmul(e_feat, w_e);
                    let cat = tape.concat_cols(&[ps, pn, pe]);
                    let act = tape.leaky_relu(cat, LEAKY_SLOPE);
                    let logit = tape.matmul(act, a);
                    logits_parts.push(logit);
                    let msg = tape.add(pn, pe);
                    msg_parts.push(msg);
                    segments.extend_from_slice(&table.dst);
                    if attention.is_some() {
                        for (&s, &d) in table.src.iter().zip(&table.dst) {
                            edge_ids.push((r, s, d));
                        }
                    }
                }
                if logits_parts.is_empty() {
                    head_outputs.clear();
                    break;
                }
                let logits = tape.concat_rows(&logits_parts);
                let alpha = tape.segment_softmax(logits, &segments);
                if let Some(sink) = attention.as_deref_mut() {
                    let av = &tape.value(alpha).data;
                    for (k, &(r, s, d)) in edge_ids.iter().enumerate() {
                        let (src_type, dst_type) = r.endpoints();
                        sink.push(AttentionRecord {
                            layer: self.name.clone(),
                            head: h,
                            relation: r.name(),
                            src_type,
                            src: s,
                            dst_type,
                            dst: d,
                            alpha: av[k],
                        });
                    }
                }
                let n_edges = segments.len();
                let alpha_vec = tape.reshape(alpha, vec![n_edges]);
                let msgs = tape.concat_rows(&msg_parts);
                let weighted = tape.mul_rowscale(msgs, alpha_vec);
                let pooled = tape.segment_sum(weighted, &segments, n_dst);
                head_outputs.push(pooled);
            }

            let w_res = tape.param(&self.res_name(dst_type, "w"), store.get(&self.res_name(dst_type, "w")));
            let b_res = tape.param(&self.res_name(dst_type, "b"), store.get(&self.res_name(dst_type, "b")));
            let res = tape.matmul(x_dst, w_res);
            let res = tape.add_row(res, b_res);
            let pre = if head_outputs.is_empty() {
                res
            } else {
                let fhat = tape.concat_cols(&head_outputs);
                tape.add(res, fhat)
            };
            out.insert(dst_type, tape.leaky_relu(pre, LEAKY_SLOPE));
        }
        Ok(out)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::Config;
    use crate::generator::{generate_synthetic, ScenarioKind};
    use crate::graph::assemble_scene_graph;
    use crate::scenario::timestep_layout;
    use crate::tape::{central_difference, rel_err};
    use crate::tensor::Tensor;
    use rand::SeedableRng;

    fn test_setup(seed: u64) -> (Config, HeteroGraph) {
        let cfg = Config { d_model: 8, ..Config::desk_test() };
        let layout = timestep_layout(cfg.rate_hz).unwrap();
        let sc = generate_synthetic(ScenarioKind::Straight, 3, seed, &layout);
        let g = assemble_scene_graph(&sc, &cfg).unwrap();
        (cfg, g)
    }

    fn random_inputs(
        tape: &mut Tape,
        g: &HeteroGraph,
        d: usize,
        rng: &mut ChaCha8Rng,
    ) -> BTreeMap<NodeType, Var> {
        let mut m = BTreeMap::new();
        for (t, n) in [
            (NodeType::Lane, g.lanes.count()),
            (NodeType::TrajectoryStep, g.steps.count()),
            (NodeType::FullTrajectory, g.trajs.count()),
        ] {
            let x = xavier_uniform(rng, n, d);
            m.insert(t, tape.leaf(x));
        }
        m
    }

    fn run_layer(
        g: &HeteroGraph,
        d: usize,
        relations: &[Relation],
        seed: u64,
        attention: Option<&mut Vec<AttentionRecord>>,
    ) -> (Tape, BTreeMap<NodeType, Var>) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let layer = HgatLayer::new("t", d, 2, relations);
        let mut store = ParameterStore::new();
        layer.init(&mut store, &mut rng);
        let mut tape = Tape::new();
        let inputs = random_inputs(&mut tape, g, d, &mut rng);
        let out = layer.forward(&mut tape, &store, &inputs, g, attention).unwrap();
        (tape, out)
    }

    #[test]
    fn attention_sums_to_one_per_target_and_head() {
        let (_, g) = test_setup(1);
        let mut records = Vec::new();
        run_layer(&g, 8, &Relation::ALL, 7, Some(&mut records));
        let mut sums: BTreeMap<(usize, NodeType, usize), f64> = BTreeMap::new();
        for r in &records {
            *sums.entry((r.head, r.dst_type, r.dst)).or_insert(0.0) += r.alpha;
        }
        assert!(!sums.is_empty());
        for ((h, t, d), s) in sums {
            assert!((s - 1.0).abs() < 1e-9, "head {h} {t:?} node {d}: sum {s}");
        }
    }

    #[test]
    fn single_incoming_edge_gets_full_weight() {
        let (_, g) = test_setup(2);
        let mut records = Vec::new();
        // step_to_traj alone: every trajectory node pools only its own steps,
        // but a single-edge case needs exactly one incoming edge; use a graph
        // slice where one target has one source. Check the general invariant
        // instead on any (head, dst) with exactly one record.
        run_layer(&g, 8, &[Relation::LaneLeft], 3, Some(&mut records));
        let mut by_dst: BTreeMap<(usize, usize), Vec<f64>> = BTreeMap::new();
        for r in &records {
            by_dst.entry((r.head, r.dst)).or_default().push(r.alpha);
        }
        let singles: Vec<_> = by_dst.values().filter(|v| v.len() == 1).collect();
        assert!(!singles.is_empty(), "expected some single-edge targets");
        for v in singles {
            assert!((v[0] - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn weights_pool_across_relations_not_within() {
        // with two relations feeding step nodes, the per-(head,dst) sum over
        // BOTH relations is 1, so per-relation sums are generally below 1
        let (_, g) = test_setup(3);
        let mut records = Vec::new();
        run_layer(
            &g,
            8,
            &[Relation::LaneToStep, Relation::StepToStep],
            5,
            Some(&mut records),
        );
        let mut total: BTreeMap<(usize, usize), f64> = BTreeMap::new();
        let mut per_rel: BTreeMap<(usize, usize, &str), f64> = BTreeMap::new();
        for r in records.iter().filter(|r| r.dst_type == NodeType::TrajectoryStep) {
            *total.entry((r.head, r.dst)).or_insert(0.0) += r.alpha;
            *per_rel.entry((r.head, r.dst, r.relation)).or_insert(0.0) += r.alpha;
        }
        for (&(h, d), s) in &total {
            assert!((s - 1.0).abs() < 1e-9, "head {h} node {d}");
        }
        let mixed = per_rel.iter().any(|(&(h, d, _), &s)| {
            total[&(h, d)] > 0.0 && s < 1.0 - 1e-6 && s > 1e-6
        });
        assert!(mixed, "expected some targets fed by both relations");
    }

    #[test]
    fn permutation_equivariance_over_lane_nodes() {
        // relabeling lane nodes (and rewiring edges accordingly) must permute
        // the outputs identically
        let (_, g) = test_setup(4);
        let d = 8;
        let n = g.lanes.count();
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let layer = HgatLayer::new("t", d, 2, &Relation::LANE_RELATIONS);
        let mut store = ParameterStore::new();
        layer.init(&mut store, &mut rng);
        let x = xavier_uniform(&mut rng, n, d);

        // permutation: reverse
        let perm: Vec<usize> = (0..n).rev().collect();
        let mut inv = vec![0usize; n];
        for (i, &p) in perm.iter().enumerate() {
            inv[p] = i;
        }

        let mut tape0 = Tape::new();
        let in0 = BTreeMap::from([(NodeType::Lane, tape0.leaf(x.clone()))]);
        let out0 = layer.forward(&mut tape0, &store, &in0, &g, None).unwrap();
        let y0 = tape0.value(out0[&NodeType::Lane]).clone();

        let mut g2 = g.clone();
        let rows: Vec<Vec<f64>> = perm
            .iter()
            .map(|&p| x.data[p * d..(p + 1) * d].to_vec())
            .collect();
        let x2 = Tensor::from_rows(&rows);
        for r in Relation::LANE_RELATIONS {
            let e = g2.edges.get_mut(&r).unwrap();
            for s in &mut e.src {
                *s = inv[*s];
            }
            for t in &mut e.dst {
                *t = inv[*t];
            }
        }
        let mut tape1 = Tape::new();
        let in1 = BTreeMap::from([(NodeType::Lane, tape1.leaf(x2))]);
        let out1 = layer.forward(&mut tape1, &store, &in1, &g2, None).unwrap();
        let y1 = tape1.value(out1[&NodeType::Lane]).clone();

        for i in 0..n {
            for j in 0..d {
                let a = y0.data[i * d + j];
                let b = y1.data[inv[i] * d + j];
                assert!((a - b).abs() < 1e-9, "node {i} dim {j}: {a} vs {b}");
            }
        }
    }

    #[test]
    fn zero_edge_projection_ignores_edge_features() {
        // with W_e = 0 for every head, perturbing edge features cannot change
        // the output
        let (_, g) = test_setup(5);
        let d = 8;
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        let layer = HgatLayer::new("t", d, 2, &[Relation::LaneToStep]);
        let mut store = ParameterStore::new();
        layer.init(&mut store, &mut rng);
        for h in 0..2 {
            let name = format!("t.{}.h{}.w_e", Relation::LaneToStep.name(), h);
            let shape = store.get(&name).shape.clone();
            store.insert(&name, Tensor::zeros(shape));
        }
        let x = xavier_uniform(&mut rng, 1, 1); // burn rng parity with run below
        let _ = x;

        let run = |g: &HeteroGraph| {
            let mut rng = ChaCha8Rng::seed_from_u64(17);
            let mut tape = Tape::new();
            let inputs = random_inputs(&mut tape, g, d, &mut rng);
            let out = layer.forward(&mut tape, &store, &inputs, g, None).unwrap();
            tape.value(out[&NodeType::TrajectoryStep]).clone()
        };
        let y0 = run(&g);
        let mut g2 = g.clone();
        for v in &mut g2.edges.get_mut(&Relation::LaneToStep).unwrap().features.data {
            *v += 0.37;
        }
        let y1 = run(&g2);
        assert_eq!(y0.data, y1.data);
    }

    #[test]
    fn layer_gradients_match_finite_differences() {
        let (_, g) = test_setup(6);
        let d = 8;
        let mut rng = ChaCha8Rng::seed_from_u64(19);
        let layer = HgatLayer::new("t", d, 2, &[Relation::LaneToStep, Relation::StepToStep]);
        let mut store = ParameterStore::new();
        layer.init(&mut store, &mut rng);
        let x_lane = xavier_uniform(&mut rng, g.lanes.count(), d);
        let x_step = xavier_uniform(&mut rng, g.steps.count(), d);

        let eval = |store: &ParameterStore, xl: &Tensor, xs: &Tensor| -> f64 {
            let mut tape = Tape::new();
            let inputs = BTreeMap::from([
                (NodeType::Lane, tape.leaf(xl.clone())),
                (NodeType::TrajectoryStep, tape.leaf(xs.clone())),
            ]);
            let out = layer.forward(&mut tape, &store, &inputs, &g, None).unwrap();
            let y = out[&NodeType::TrajectoryStep];
            let s = tape.sum_all(y);
            tape.value(s).data[0]
        };

        let mut tape = Tape::new();
        let xl_var = tape.leaf(x_lane.clone());
        let xs_var = tape.leaf(x_step.clone());
        let inputs = BTreeMap::from([
            (NodeType::Lane, xl_var),
            (NodeType::TrajectoryStep, xs_var),
        ]);
        let out = layer.forward(&mut tape, &store, &inputs, &g, None).unwrap();
        let root = tape.sum_all(out[&NodeType::TrajectoryStep]);
        let grads = tape.backward(root);
        let pgrads = tape.param_grads(&grads);

        // spot-check several parameter entries against central differences
        let mut checked = 0usize;
        for (name, grad) in &pgrads {
            for &i in &[0usize, grad.data.len() / 2] {
                let base = store.get(name).data.clone();
                let fd = central_difference(&base, i, 1e-5, |pert| {
                    let mut s2 = store.clone();
                    let shape = s2.get(name).shape.clone();
                    s2.insert(name, Tensor::new(shape, pert.to_vec()));
                    eval(&s2, &x_lane, &x_step)
                });
                let an = grad.data[i];
                if fd.abs() > 1e-10 || an.abs() > 1e-10 {
                    assert!(
                        rel_err(an, fd) < 1e-3,
                        "{name}[{i}]: analytic {an} vs fd {fd}"
                    );
                    checked += 1;
                }
            }
        }
        assert!(checked > 10, "too few gradient checks ran: {checked}");

        // input gradients too
        let gxl = grads.get(xl_var).unwrap().to_vec();
        for &i in &[0usize, gxl.len() / 2, gxl.len() - 1] {
            let fd = central_difference(&x_lane.data.clone(), i, 1e-5, |pert| {
                let t = Tensor::new(x_lane.shape.clone(), pert.to_vec());
                eval(&store, &t, &x_step)
            });
            if fd.abs() > 1e-10 || gxl[i].abs() > 1e-10 {
                assert!(rel_err(gxl[i], fd) < 1e-3, "x_lane[{i}]: {} vs {fd}", gxl[i]);
            }
        }
    }

    #[test]
    fn hand_sized_graph_matches_loop_oracle() {
        // one relation, one head, 2 sources -> 1 target: the layer must equal
        // a straightforward dense computation done with plain loops
        let d = 4;
        let layer = HgatLayer::new("t", d, 1, &[Relation::LaneLeft]);
        let mut rng = ChaCha8Rng::seed_from_u64(23);
        let mut store = ParameterStore::new();
        layer.init(&mut store, &mut rng);

        let (_, mut g) = test_setup(7);
        // overwrite lane edges with a tiny hand-built table: nodes {0,1} -> 2
        let feats = Tensor::from_rows(&[vec![0.1, -0.2, 0.3, 0.4], vec![-0.5, 0.6, 0.7, -0.8]]);
        g.edges.insert(
            Relation::LaneLeft,
            EdgeTable {
                relation: Relation::LaneLeft,
                src: vec![0, 1],
                dst: vec![2, 2],
                features: feats.clone(),
            },
        );
        let x = xavier_uniform(&mut rng, g.lanes.count(), d);

        let mut tape = Tape::new();
        let inputs = BTreeMap::from([(NodeType::Lane, tape.leaf(x.clone()))]);
        let out = layer.forward(&mut tape, &store, &inputs, &g, None).unwrap();
        let y = tape.value(out[&NodeType::Lane]).clone();

        // oracle
        let get = |n: &str| store.get(&format!("t.lane_left.h0.{n}"));
        let matvec = |w: &Tensor, v: &[f64]| -> Vec<f64> {
            let (r, c) = (w.rows(), w.cols());
            (0..c)
                .map(|j| (0..r).map(|i| v[i] * w.data[i * c + j]).sum())
                .collect()
        };
        let lr = |v: f64| if v >= 0.0 { v } else { LEAKY_SLOPE * v };
        let row = |t: &Tensor, i: usize| t.data[i * t.cols()..(i + 1) * t.cols()].to_vec();
        let mut logits = Vec::new();
        let mut msgs = Vec::new();
        for k in 0..2 {
            let ps = matvec(get("w_s"), &row(&x, 2));
            let pn = matvec(get("w_n"), &row(&x, k));
            let pe = matvec(get("w_e"), &row(&feats, k));
            let cat: Vec<f64> = ps.iter().chain(&pn).chain(&pe).copied().collect();
            let a = get("a");
            let logit: f64 = cat.iter().enumerate().map(|(i, &v)| lr(v) * a.data[i]).sum();
            logits.push(logit);
            msgs.push(pn.iter().zip(&pe).map(|(a, b)| a + b).collect::<Vec<f64>>());
        }
        let m = logits[0].max(logits[1]);
        let e0 = (logits[0] - m).exp();
        let e1 = (logits[1] - m).exp();
        let (a0, a1) = (e0 / (e0 + e1), e1 / (e0 + e1));
        let w_res = store.get("t.res.lane.w");
        let res = matvec(w_res, &row(&x, 2));
        for j in 0..d {
            let want = lr(res[j] + a0 * msgs[0][j] + a1 * msgs[1][j]);
            let got = y.data[2 * d + j];
            assert!((want - got).abs() < 1e-12, "dim {j}: {want} vs {got}");
        }
    }

    #[test]
    fn rejects_wrong_input_width() {
        let (_, g) = test_setup(8);
        let layer = HgatLayer::new("t", 8, 2, &[Relation::LaneLeft]);
        let mut rng = ChaCha8Rng::seed_from_u64(29);
        let mut store = ParameterStore::new();
        layer.init(&mut store, &mut rng);
        let mut tape = Tape::new();
        let bad = tape.leaf(xavier_uniform(&mut rng, g.lanes.count(), 6));
        let inputs = BTreeMap::from([(NodeType::Lane, bad)]);
        let err = layer.forward(&mut tape, &store, &inputs, &g, None);
        assert!(matches!(err, Err(Error::DimensionMismatch { .. })));
    }
}

//! Reverse-mode differentiation tape.
//!
//! Operations append nodes to the tape in execution order; `backward` walks
//! the records in exact reverse order and accumulates gradients into every
//! input. One tape corresponds to one forward/backward pass and is discarded
//! afterwards; parameters live outside the tape and are bound as named leaves.

use std::collections::HashMap;

use crate::tensor::Tensor;

/// Handle to a value recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(pub usize);

type BackwardFn = Box<dyn Fn(&Tape, &[f64], &mut Grads)>;

struct Node {
    value: Tensor,
    backward: Option<BackwardFn>,
}

/// Per-variable gradient buffers, indexed by `Var`.
pub struct Grads {
    slots: Vec<Option<Vec<f64>>>,
}

impl Grads {
    fn new(n: usize) -> Self {
        Grads { slots: vec![None; n] }
    }

    pub fn add(&mut self, v: Var, contribution: &[f64]) {
        match &mut self.slots[v.0] {
            Some(g) => {
                for (a, b) in g.iter_mut().zip(contribution) {
                    *a += b;
                }
            }
            None => self.slots[v.0] = Some(contribution.to_vec()),
        }
    }

    pub fn get(&self, v: Var) -> Option<&[f64]> {
        self.slots[v.0].as_deref()
    }
}

pub struct Tape {
    nodes: Vec<Node>,
    params: Vec<(String, Var)>,
    param_index: HashMap<String, Var>,
    /// Running-statistic updates produced by batch norm in train mode,
    /// applied to the parameter store by the caller after the step.
    pub stat_updates: Vec<(String, Tensor)>,
    check_finite: bool,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

impl Tape {
    pub fn new() -> Self {
        Tape {
            nodes: Vec::new(),
            params: Vec::new(),
            param_index: HashMap::new(),
            stat_updates: Vec::new(),
            check_finite: true,
        }
    }

    pub fn unchecked() -> Self {
        let mut t = Self::new();
        t.check_finite = false;
        t
    }

    fn push(&mut self, value: Tensor, backward: Option<BackwardFn>) -> Var {
        if self.check_finite {
            if let Err(e) = value.check_finite("tape op output") {
                panic!("{e}");
            }
        }
        self.nodes.push(Node { value, backward });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.nodes[v.0].value.shape
    }

    /// Record a constant/input leaf.
    pub fn leaf(&mut self, t: Tensor) -> Var {
        self.push(t, None)
    }

    /// Bind a named parameter as a leaf. Binding the same name twice returns
    /// the same variable.
    pub fn param(&mut self, name: &str, value: &Tensor) -> Var {
        if let Some(v) = self.param_index.get(name) {
            return *v;
        }
        let v = self.push(value.clone(), None);
        self.params.push((name.to_string(), v));
        self.param_index.insert(name.to_string(), v);
        v
    }

    /// Run the backward pass from a scalar root. Returns gradients for every
    /// reachable variable; use [`Tape::param_grads`] for the named view.
    pub fn backward(&mut self, root: Var) -> Grads {
        assert_eq!(self.nodes[root.0].value.len(), 1, "backward root must be scalar");
        let backs: Vec<Option<BackwardFn>> =
            self.nodes.iter_mut().map(|n| n.backward.take()).collect();
        let mut grads = Grads::new(self.nodes.len());
        grads.add(root, &[1.0]);
        for i in (0..self.nodes.len()).rev() {
            if let Some(f) = &backs[i] {
                if let Some(g) = grads.slots[i].clone() {
                    f(self, &g, &mut grads);
                }
            }
        }
        grads
    }

    /// Named parameter gradients after a backward pass. Parameters the loss
    /// does not reach get zero gradients.
    pub fn param_grads(&self, grads: &Grads) -> Vec<(String, Tensor)> {
        self.params
            .iter()
            .map(|(name, v)| {
                let shape = self.nodes[v.0].value.shape.clone();
                let data = match grads.get(*v) {
                    Some(g) => g.to_vec(),
                    None => vec![0.0; self.nodes[v.0].value.len()],
                };
                (name.clone(), Tensor::new(shape, data))
            })
            .collect()
    }

    // ---- elementwise ----

    fn assert_same_shape(&self, op: &str, a: Var, b: Var) {
        assert_eq!(
            self.shape(a),
            self.shape(b),
            "{op}: shape mismatch {:?} vs {:?}",
            self.shape(a),
            self.shape(b)
        );
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        self.assert_same_shape("add", a, b);
        let data = self
            .value(a)
            .data
            .iter()
            .zip(&self.value(b).data)
            .map(|(x, y)| x + y)
            .collect();
        let value = Tensor::new(self.shape(a).to_vec(), data);
        self.push(
            value,
            Some(Box::new(move |_, g, grads| {
                grads.add(a, g);
                grads.add(b, g);
            })),
        )
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        self.assert_same_shape("sub", a, b);
        let data = self
            .value(a)
            .data
            .iter()
            .zip(&self.value(b).data)
            .map(|(x, y)| x - y)
            .collect();
        let value = Tensor::new(self.shape(a).to_vec(), data);
        self.push(
            value,
            Some(Box::new(move |_, g, grads| {
                grads.add(a, g);
                let neg: Vec<f64> = g.iter().map(|x| -x).collect();
                grads.add(b, &neg);
            })),
        )
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        self.assert_same_shape("mul", a, b);
        let data = self
            .value(a)
            .data
            .iter()
            .zip(&self.value(b).data)
            .map(|(x, y)| x * y)
            .collect();
        let value = Tensor::new(self.shape(a).to_vec(), data);
        self.push(
            value,
            Some(Box::new(move |t, g, grads| {
                let da: Vec<f64> = g.iter().zip(&t.value(b).data).map(|(g, y)| g * y).collect();
                let db: Vec<f64> = g.iter().zip(&t.value(a).data).map(|(g, x)| g * x).collect();
                grads.add(a, &da);
                grads.add(b, &db);
            })),
        )
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let data = self.value(a).data.iter().map(|x| x * c).collect();
        let value = Tensor::new(self.shape(a).to_vec(), data);
        self.push(
            value,
            Some(Box::new(move |_, g, grads| {
                let da: Vec<f64> = g.iter().map(|x| x * c).collect();
                grads.add(a, &da);
            })),
        )
    }

    pub fn add_scalar(&mut self, a: Var, c: f64) -> Var {
        let data = self.value(a).data.iter().map(|x| x + c).collect();
        let value = Tensor::new(self.shape(a).to_vec(), data);
        self.push(value, Some(Box::new(move |_, g, grads| grads.add(a, g))))
    }

    /// Elementwise max(x, slope*x). `relu` is the slope = 0 case.
    pub fn leaky_relu(&mut self, a: Var, slope: f64) -> Var {
        let data = self
            .value(a)
            .data
            .iter()
            .map(|&x| if x > 0.0 { x } else { slope * x })
            .collect();
        let value = Tensor::new(self.shape(a).to_vec(), data);
        self.push(
            value,
            Some(Box::new(move |t, g, grads| {
                let da: Vec<f64> = g
                    .iter()
                    .zip(&t.value(a).data)
                    .map(|(g, &x)| if x > 0.0 { *g } else { g * slope })
                    .collect();
                grads.add(a, &da);
            })),
        )
    }

    pub fn relu(&mut self, a: Var) -> Var {
        self.leaky_relu(a, 0.0)
    }

    /// Smooth-L1 (Huber, delta = 1) applied elementwise.
    pub fn huber(&mut self, a: Var) -> Var {
        let data = self
            .value(a)
            .data
            .iter()
            .map(|&x| {
                if x.abs() < 1.0 {
                    0.5 * x * x
                } else {
                    x.abs() - 0.5
                }
            })
            .collect();
        let value = Tensor::new(self.shape(a).to_vec(), data);
        self.push(
            value,
            Some(Box::new(move |t, g, grads| {
                let da: Vec<f64> = g
                    .iter()
                    .zip(&t.value(a).data)
                    .map(|(g, &x)| g * x.clamp(-1.0, 1.0))
                    .collect();
                grads.add(a, &da);
            })),
        )
    }

    // ---- matrix ----

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let (n, k) = (self.value(a).rows(), self.value(a).cols());
        let (k2, m) = (self.value(b).rows(), self.value(b).cols());
        assert_eq!(
            k, k2,
            "matmul: inner dimensions differ, left {:?} right {:?}",
            self.shape(a),
            self.shape(b)
        );
        let av = &self.value(a).data;
        let bv = &self.value(b).data;
        let mut out = vec![0.0; n * m];
        for i in 0..n {
            for p in 0..k {
                let x = av[i * k + p];
                if x == 0.0 {
                    continue;
                }
                let brow = &bv[p * m..(p + 1) * m];
                let orow = &mut out[i * m..(i + 1) * m];
                for (o, y) in orow.iter_mut().zip(brow) {
                    *o += x * y;
                }
            }
        }
        let value = Tensor::new(vec![n, m], out);
        self.push(
            value,
            Some(Box::new(move |t, g, grads| {
                let av = &t.value(a).data;
                let bv = &t.value(b).data;
                // dA = G B^T
                let mut da = vec![0.0; n * k];
                for i in 0..n {
                    for p in 0..k {
                        let mut s = 0.0;
                        for j in 0..m {
                            s += g[i * m + j] * bv[p * m + j];
                        }
                        da[i * k + p] = s;
                    }
                }
                // dB = A^T G
                let mut db = vec![0.0; k * m];
                for p in 0..k {
                    for i in 0..n {
                        let x = av[i * k + p];
                        if x == 0.0 {
                            continue;
                        }
                        for j in 0..m {
                            db[p * m + j] += x * g[i * m + j];
                        }
                    }
                }
                grads.add(a, &da);
                grads.add(b, &db);
            })),
        )
    }

    /// Broadcast-add a row vector `b[D]` to every row of `a[N×D]`.
    pub fn add_row(&mut self, a: Var, b: Var) -> Var {
        let (n, d) = (self.value(a).rows(), self.value(a).cols());
        assert_eq!(
            self.value(b).len(),
            d,
            "add_row: row length {:?} does not match {:?}",
            self.shape(b),
            self.shape(a)
        );
        let bv = &self.value(b).data;
        let data: Vec<f64> = self
            .value(a)
            .data
            .iter()
            .enumerate()
            .map(|(i, x)| x + bv[i % d])
            .collect();
        let value = Tensor::new(self.shape(a).to_vec(), data);
        self.push(
            value,
            Some(Box::new(move |_, g, grads| {
                grads.add(a, g);
                let mut db = vec![0.0; d];
                for i in 0..n {
                    for j in 0..d {
                        db[j] += g[i * d + j];
                    }
                }
                grads.add(b, &db);
            })),
        )
    }

    /// Multiply each row of `a[N×D]` by the matching scalar of `s[N]`.
    pub fn mul_rowscale(&mut self, a: Var, s: Var) -> Var {
        let (n, d) = (self.value(a).rows(), self.value(a).cols());
        assert_eq!(self.value(s).len(), n, "mul_rowscale: scale length mismatch");
        let sv = self.value(s).data.clone();
        let data: Vec<f64> = self
            .value(a)
            .data
            .iter()
            .enumerate()
            .map(|(i, x)| x * sv[i / d])
            .collect();
        let value = Tensor::new(self.shape(a).to_vec(), data);
        self.push(
            value,
            Some(Box::new(move |t, g, grads| {
                let av = &t.value(a).data;
                let sv = &t.value(s).data;
                let da: Vec<f64> = g.iter().enumerate().map(|(i, g)| g * sv[i / d]).collect();
                let mut ds = vec![0.0; n];
                for i in 0..n {
                    for j in 0..d {
                        ds[i] += g[i * d + j] * av[i * d + j];
                    }
                }
                grads.add(a, &da);
                grads.add(s, &ds);
            })),
        )
    }

    /// Row-wise reduction of `a[N×D]` to `[N]`.
    pub fn rowwise_sum(&mut self, a: Var) -> Var {
        let (n, d) = (self.value(a).rows(), self.value(a).cols());
        let av = &self.value(a).data;
        let data: Vec<f64> = (0..n).map(|i| av[i * d..(i + 1) * d].iter().sum()).collect();
        let value = Tensor::new(vec![n], data);
        self.push(
            value,
            Some(Box::new(move |_, g, grads| {
                let mut da = vec![0.0; n * d];
                for i in 0..n {
                    for j in 0..d {
                        da[i * d + j] = g[i];
                    }
                }
                grads.add(a, &da);
            })),
        )
    }

    pub fn sum_all(&mut self, a: Var) -> Var {
        let s: f64 = self.value(a).data.iter().sum();
        let n = self.value(a).len();
        let value = Tensor::scalar(s);
        self.push(
            value,
            Some(Box::new(move |_, g, grads| {
                grads.add(a, &vec![g[0]; n]);
            })),
        )
    }

    pub fn mean_all(&mut self, a: Var) -> Var {
        let n = self.value(a).len().max(1);
        let s = self.sum_all(a);
        self.scale(s, 1.0 / n as f64)
    }

    pub fn reshape(&mut self, a: Var, shape: Vec<usize>) -> Var {
        assert_eq!(
            shape.iter().product::<usize>(),
            self.value(a).len(),
            "reshape: element count mismatch"
        );
        let value = Tensor::new(shape, self.value(a).data.clone());
        self.push(value, Some(Box::new(move |_, g, grads| grads.add(a, g))))
    }

    /// Select rows of `a` by index, duplicates allowed. Backward scatter-adds.
    pub fn gather_rows(&mut self, a: Var, idx: &[usize]) -> Var {
        let (n, d) = (self.value(a).rows(), self.value(a).cols());
        let av = &self.value(a).data;
        let mut data = Vec::with_capacity(idx.len() * d);
        for &i in idx {
            assert!(i < n, "gather_rows: index {i} out of range {n}");
            data.extend_from_slice(&av[i * d..(i + 1) * d]);
        }
        let value = Tensor::new(vec![idx.len(), d], data);
        let idx = idx.to_vec();
        self.push(
            value,
            Some(Box::new(move |_, g, grads| {
                let mut da = vec![0.0; n * d];
                for (k, &i) in idx.iter().enumerate() {
                    for j in 0..d {
                        da[i * d + j] += g[k * d + j];
                    }
                }
                grads.add(a, &da);
            })),
        )
    }

    /// Concatenate along columns; every input must have the same row count.
    pub fn concat_cols(&mut self, parts: &[Var]) -> Var {
        assert!(!parts.is_empty());
        let n = self.value(parts[0]).rows();
        let widths: Vec<usize> = parts.iter().map(|&p| self.value(p).cols()).collect();
        for &p in parts {
            assert_eq!(self.value(p).rows(), n, "concat_cols: row count mismatch");
        }
        let total: usize = widths.iter().sum();
        let mut data = Vec::with_capacity(n * total);
        for i in 0..n {
            for (&p, &w) in parts.iter().zip(&widths) {
                data.extend_from_slice(&self.value(p).data[i * w..(i + 1) * w]);
            }
        }
        let value = Tensor::new(vec![n, total], data);
        let parts = parts.to_vec();
        self.push(
            value,
            Some(Box::new(move |_, g, grads| {
                let mut off = 0;
                for (&p, &w) in parts.iter().zip(&widths) {
                    let mut dp = vec![0.0; n * w];
                    for i in 0..n {
                        dp[i * w..(i + 1) * w]
                            .copy_from_slice(&g[i * total + off..i * total + off + w]);
                    }
                    grads.add(p, &dp);
                    off += w;
                }
            })),
        )
    }

    /// Concatenate along rows; every input must have the same column count.
    pub fn concat_rows(&mut self, parts: &[Var]) -> Var {
        assert!(!parts.is_empty());
        let d = self.value(parts[0]).cols();
        let mut data = Vec::new();
        let mut rows = Vec::new();
        for &p in parts {
            assert_eq!(self.value(p).cols(), d, "concat_rows: column count mismatch");
            rows.push(self.value(p).rows());
            data.extend_from_slice(&self.value(p).data);
        }
        let n: usize = rows.iter().sum();
        let value = Tensor::new(vec![n, d], data);
        let parts = parts.to_vec();
        self.push(
            value,
            Some(Box::new(move |_, g, grads| {
                let mut off = 0;
                for (&p, &r) in parts.iter().zip(&rows) {
                    grads.add(p, &g[off * d..(off + r) * d]);
                    off += r;
                }
            })),
        )
    }

    /// Per-row running sum down `a[T×D]`.
    pub fn cumsum_rows(&mut self, a: Var) -> Var {
        let (t_len, d) = (self.value(a).rows(), self.value(a).cols());
        let av = &self.value(a).data;
        let mut data = vec![0.0; t_len * d];
        for j in 0..d {
            let mut acc = 0.0;
            for t in 0..t_len {
                acc += av[t * d + j];
                data[t * d + j] = acc;
            }
        }
        let value = Tensor::new(vec![t_len, d], data);
        self.push(
            value,
            Some(Box::new(move |_, g, grads| {
                let mut da = vec![0.0; t_len * d];
                for j in 0..d {
                    let mut acc = 0.0;
                    for t in (0..t_len).rev() {
                        acc += g[t * d + j];
                        da[t * d + j] = acc;
                    }
                }
                grads.add(a, &da);
            })),
        )
    }

    /// Shift rows by `offset` with edge replication: out[t] = in[clamp(t - offset)].
    pub fn shift_rows(&mut self, a: Var, offset: i64) -> Var {
        let (n, d) = (self.value(a).rows(), self.value(a).cols());
        assert!(n >= 1, "shift_rows: empty input");
        let src_row = move |t: usize| -> usize {
            (t as i64 - offset).clamp(0, n as i64 - 1) as usize
        };
        let av = &self.value(a).data;
        let mut data = Vec::with_capacity(n * d);
        for t in 0..n {
            let s = src_row(t);
            data.extend_from_slice(&av[s * d..(s + 1) * d]);
        }
        let value = Tensor::new(vec![n, d], data);
        self.push(
            value,
            Some(Box::new(move |_, g, grads| {
                let mut da = vec![0.0; n * d];
                for t in 0..n {
                    let s = src_row(t);
                    for j in 0..d {
                        da[s * d + j] += g[t * d + j];
                    }
                }
                grads.add(a, &da);
            })),
        )
    }

    // ---- segment ops ----

    /// Sum rows of `values[E×D]` into their target segment: out[i] = Σ_{e: seg[e]=i} v[e].
    /// Targets with no incident rows are zero.
    pub fn segment_sum(&mut self, values: Var, segments: &[usize], n_targets: usize) -> Var {
        let (e, d) = (self.value(values).rows(), self.value(values).cols());
        assert_eq!(segments.len(), e, "segment_sum: segment count mismatch");
        assert!(segments.iter().all(|&s| s < n_targets), "segment_sum: segment id out of range");
        let vv = &self.value(values).data;
        let mut data = vec![0.0; n_targets * d];
        for (k, &s) in segments.iter().enumerate() {
            for j in 0..d {
                data[s * d + j] += vv[k * d + j];
            }
        }
        let value = Tensor::new(vec![n_targets, d], data);
        let segments = segments.to_vec();
        self.push(
            value,
            Some(Box::new(move |_, g, grads| {
                let mut dv = vec![0.0; e * d];
                for (k, &s) in segments.iter().enumerate() {
                    dv[k * d..(k + 1) * d].copy_from_slice(&g[s * d..(s + 1) * d]);
                }
                grads.add(values, &dv);
            })),
        )
    }

    /// Column-wise softmax over rows sharing a segment id: for each column c
    /// and segment s, out[e][c] = exp(x[e][c]) / Σ_{e': seg[e']=s} exp(x[e'][c]).
    pub fn segment_softmax(&mut self, logits: Var, segments: &[usize]) -> Var {
        let (e, d) = (self.value(logits).rows(), self.value(logits).cols());
        assert_eq!(segments.len(), e, "segment_softmax: segment count mismatch");
        assert_eq!(self.shape(logits).len(), 2, "segment_softmax: expects 2-D input");
        let n_seg = segments.iter().copied().max().map_or(0, |m| m + 1);
        let lv = &self.value(logits).data;
        // max-subtraction for stability, per (segment, column)
        let mut seg_max = vec![f64::NEG_INFINITY; n_seg * d];
        for (k, &s) in segments.iter().enumerate() {
            for j in 0..d {
                let m = &mut seg_max[s * d + j];
                *m = m.max(lv[k * d + j]);
            }
        }
        let mut expd = vec![0.0; e * d];
        let mut seg_sum = vec![0.0; n_seg * d];
        for (k, &s) in segments.iter().enumerate() {
            for j in 0..d {
                let v = (lv[k * d + j] - seg_max[s * d + j]).exp();
                expd[k * d + j] = v;
                seg_sum[s * d + j] += v;
            }
        }
        let mut data = vec![0.0; e * d];
        for (k, &s) in segments.iter().enumerate() {
            for j in 0..d {
                data[k * d + j] = expd[k * d + j] / seg_sum[s * d + j];
            }
        }
        let value = Tensor::new(vec![e, d], data.clone());
        let segments = segments.to_vec();
        let alpha = data;
        self.push(
            value,
            Some(Box::new(move |_, g, grads| {
                // dx = α ⊙ (g − Σ_seg α ⊙ g), per segment and column
                let mut seg_dot = vec![0.0; n_seg * d];
                for (k, &s) in segments.iter().enumerate() {
                    for j in 0..d {
                        seg_dot[s * d + j] += alpha[k * d + j] * g[k * d + j];
                    }
                }
                let mut dl = vec![0.0; e * d];
                for (k, &s) in segments.iter().enumerate() {
                    for j in 0..d {
                        dl[k * d + j] =
                            alpha[k * d + j] * (g[k * d + j] - seg_dot[s * d + j]);
                    }
                }
                grads.add(logits, &dl);
            })),
        )
    }

    // ---- batch norm ----

    /// Train-mode batch norm over the row axis, per column. Returns the output
    /// plus the batch mean and (biased) variance for running-stat updates.
    pub fn batch_norm_train(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        eps: f64,
    ) -> (Var, Tensor, Tensor) {
        let (n, d) = (self.value(x).rows(), self.value(x).cols());
        assert!(n >= 1, "batch_norm: empty input");
        assert_eq!(self.value(gamma).len(), d, "batch_norm: gamma length mismatch");
        assert_eq!(self.value(beta).len(), d, "batch_norm: beta length mismatch");
        let xv = &self.value(x).data;
        let mut mean = vec![0.0; d];
        for i in 0..n {
            for j in 0..d {
                mean[j] += xv[i * d + j];
            }
        }
        for m in &mut mean {
            *m /= n as f64;
        }
        let mut var = vec![0.0; d];
        for i in 0..n {
            for j in 0..d {
                let c = xv[i * d + j] - mean[j];
                var[j] += c * c;
            }
        }
        for v in &mut var {
            *v /= n as f64;
        }
        let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + eps).sqrt()).collect();
        let mut xhat = vec![0.0; n * d];
        for i in 0..n {
            for j in 0..d {
                xhat[i * d + j] = (xv[i * d + j] - mean[j]) * inv_std[j];
            }
        }
        let gv = &self.value(gamma).data;
        let bv = &self.value(beta).data;
        let mut out = vec![0.0; n * d];
        for i in 0..n {
            for j in 0..d {
                out[i * d + j] = gv[j] * xhat[i * d + j] + bv[j];
            }
        }
        let value = Tensor::new(vec![n, d], out);
        let mean_t = Tensor::new(vec![d], mean);
        let var_t = Tensor::new(vec![d], var.clone());
        let inv_std_b = inv_std;
        let xhat_b = xhat;
        let y = self.push(
            value,
            Some(Box::new(move |t, g, grads| {
                let gv = &t.value(gamma).data;
                let mut dgamma = vec![0.0; d];
                let mut dbeta = vec![0.0; d];
                let mut gsum = vec![0.0; d];
                let mut gxhat_sum = vec![0.0; d];
                for i in 0..n {
                    for j in 0..d {
                        let gij = g[i * d + j];
                        dgamma[j] += gij * xhat_b[i * d + j];
                        dbeta[j] += gij;
                        gsum[j] += gij;
                        gxhat_sum[j] += gij * xhat_b[i * d + j];
                    }
                }
                let mut dx = vec![0.0; n * d];
                for i in 0..n {
                    for j in 0..d {
                        dx[i * d + j] = gv[j] * inv_std_b[j]
                            * (g[i * d + j]
                                - gsum[j] / n as f64
                                - xhat_b[i * d + j] * gxhat_sum[j] / n as f64);
                    }
                }
                grads.add(x, &dx);
                grads.add(gamma, &dgamma);
                grads.add(beta, &dbeta);
            })),
        );
        (y, mean_t, var_t)
    }

    /// Eval-mode batch norm using fixed running statistics.
    pub fn batch_norm_eval(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        mean: &Tensor,
        var: &Tensor,
        eps: f64,
    ) -> Var {
        let (n, d) = (self.value(x).rows(), self.value(x).cols());
        assert_eq!(mean.len(), d, "batch_norm_eval: mean length mismatch");
        assert_eq!(var.len(), d, "batch_norm_eval: var length mismatch");
        let inv_std: Vec<f64> = var.data.iter().map(|v| 1.0 / (v + eps).sqrt()).collect();
        let xv = &self.value(x).data;
        let gv = &self.value(gamma).data;
        let bv = &self.value(beta).data;
        let mut out = vec![0.0; n * d];
        let mut xhat = vec![0.0; n * d];
        for i in 0..n {
            for j in 0..d {
                let h = (xv[i * d + j] - mean.data[j]) * inv_std[j];
                xhat[i * d + j] = h;
                out[i * d + j] = gv[j] * h + bv[j];
            }
        }
        let value = Tensor::new(vec![n, d], out);
        self.push(
            value,
            Some(Box::new(move |t, g, grads| {
                let gv = &t.value(gamma).data;
                let mut dx = vec![0.0; n * d];
                let mut dgamma = vec![0.0; d];
                let mut dbeta = vec![0.0; d];
                for i in 0..n {
                    for j in 0..d {
                        let gij = g[i * d + j];
                        dx[i * d + j] = gij * gv[j] * inv_std[j];
                        dgamma[j] += gij * xhat[i * d + j];
                        dbeta[j] += gij;
                    }
                }
                grads.add(x, &dx);
                grads.add(gamma, &dgamma);
                grads.add(beta, &dbeta);
            })),
        )
    }
}

/// Central finite difference of a scalar-valued function with respect to one
/// coordinate of its input vector. Independent oracle used by gradient tests.
pub fn central_difference<F>(base: &[f64], i: usize, step: f64, mut f: F) -> f64
where
    F: FnMut(&[f64]) -> f64,
{
    let mut p = base.to_vec();
    p[i] = base[i] + step;
    let hi = f(&p);
    p[i] = base[i] - step;
    let lo = f(&p);
    (hi - lo) / (2.0 * step)
}

/// Relative error with an absolute floor, for comparing gradients.
pub fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-8)
}

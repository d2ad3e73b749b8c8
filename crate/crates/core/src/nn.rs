//! Layers, parameter storage, initialization, and the Adam optimizer.

use std::collections::BTreeMap;

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

pub const BN_EPS: f64 = 1e-5;
pub const BN_MOMENTUM: f64 = 0.1;
/// LeakyReLU slope used as the network nonlinearity.
pub const LEAKY_SLOPE: f64 = 0.2;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

/// Named, shaped parameter arrays plus non-trainable buffers (running stats).
#[derive(Debug, Clone, Default)]
pub struct ParameterStore {
    pub params: BTreeMap<String, Tensor>,
    pub buffers: BTreeMap<String, Tensor>,
}

impl ParameterStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: &str, t: Tensor) {
        self.params.insert(name.to_string(), t);
    }

    pub fn get(&self, name: &str) -> &Tensor {
        self.params
            .get(name)
            .unwrap_or_else(|| panic!("missing parameter {name}"))
    }

    pub fn buffer(&self, name: &str) -> &Tensor {
        self.buffers
            .get(name)
            .unwrap_or_else(|| panic!("missing buffer {name}"))
    }

    pub fn n_scalars(&self) -> usize {
        self.params.values().map(|t| t.len()).sum()
    }

    /// Apply batch-norm running-stat updates collected during a train-mode pass.
    pub fn apply_stat_updates(&mut self, updates: &[(String, Tensor)]) {
        for (name, batch_stat) in updates {
            let buf = self
                .buffers
                .get_mut(name)
                .unwrap_or_else(|| panic!("missing buffer {name}"));
            for (r, b) in buf.data.iter_mut().zip(&batch_stat.data) {
                *r = (1.0 - BN_MOMENTUM) * *r + BN_MOMENTUM * *b;
            }
        }
    }
}

/// Xavier-uniform initialization for a [fan_in × fan_out] matrix.
pub fn xavier_uniform(rng: &mut ChaCha8Rng, fan_in: usize, fan_out: usize) -> Tensor {
    let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
    let data = (0..fan_in * fan_out)
        .map(|_| rng.gen_range(-limit..limit))
        .collect();
    Tensor::new(vec![fan_in, fan_out], data)
}

/// Fully connected layer `y = xW + b`.
#[derive(Debug, Clone)]
pub struct Linear {
    pub name: String,
    pub din: usize,
    pub dout: usize,
}

impl Linear {
    pub fn new(name: impl Into<String>, din: usize, dout: usize) -> Self {
        Linear { name: name.into(), din, dout }
    }

    pub fn init(&self, store: &mut ParameterStore, rng: &mut ChaCha8Rng) {
        store.insert(&format!("{}.w", self.name), xavier_uniform(rng, self.din, self.dout));
        store.insert(&format!("{}.b", self.name), Tensor::zeros(vec![self.dout]));
    }

    /// Zero initialization, used for offset-producing output layers.
    pub fn init_zero(&self, store: &mut ParameterStore) {
        store.insert(&format!("{}.w", self.name), Tensor::zeros(vec![self.din, self.dout]));
        store.insert(&format!("{}.b", self.name), Tensor::zeros(vec![self.dout]));
    }

    pub fn forward(&self, tape: &mut Tape, store: &ParameterStore, x: Var) -> Var {
        let xs = tape.shape(x).to_vec();
        if tape.value(x).cols() != self.din {
            panic!(
                "{}",
                Error::DimensionMismatch {
                    op: format!("linear {}", self.name),
                    left: xs,
                    right: vec![self.din, self.dout],
                }
            );
        }
        let w = tape.param(&format!("{}.w", self.name), store.get(&format!("{}.w", self.name)));
        let b = tape.param(&format!("{}.b", self.name), store.get(&format!("{}.b", self.name)));
        let xw = tape.matmul(x, w);
        tape.add_row(xw, b)
    }
}

/// The public checked entry point for the linear op: validates shapes and
/// returns a dimension error naming both shapes instead of panicking.
pub fn linear(
    tape: &mut Tape,
    x: Var,
    w: Var,
    b: Var,
) -> Result<Var> {
    let (xc, wr, wc) = (
        tape.value(x).cols(),
        tape.value(w).rows(),
        tape.value(w).cols(),
    );
    if xc != wr || tape.value(b).len() != wc {
        return Err(Error::DimensionMismatch {
            op: "linear".into(),
            left: tape.shape(x).to_vec(),
            right: tape.shape(w).to_vec(),
        });
    }
    let xw = tape.matmul(x, w);
    Ok(tape.add_row(xw, b))
}

/// Batch normalization over the row (node/agent) axis.
#[derive(Debug, Clone)]
pub struct BatchNorm {
    pub name: String,
    pub d: usize,
}

impl BatchNorm {
    pub fn new(name: impl Into<String>, d: usize) -> Self {
        BatchNorm { name: name.into(), d }
    }

    pub fn init(&self, store: &mut ParameterStore) {
        store.insert(&format!("{}.gamma", self.name), Tensor::new(vec![self.d], vec![1.0; self.d]));
        store.insert(&format!("{}.beta", self.name), Tensor::zeros(vec![self.d]));
        store
            .buffers
            .insert(format!("{}.running_mean", self.name), Tensor::zeros(vec![self.d]));
        store.buffers.insert(
            format!("{}.running_var", self.name),
            Tensor::new(vec![self.d], vec![1.0; self.d]),
        );
    }

    pub fn forward(&self, tape: &mut Tape, store: &ParameterStore, x: Var, mode: Mode) -> Var {
        let gamma = tape.param(
            &format!("{}.gamma", self.name),
            store.get(&format!("{}.gamma", self.name)),
        );
        let beta = tape.param(
            &format!("{}.beta", self.name),
            store.get(&format!("{}.beta", self.name)),
        );
        match mode {
            Mode::Train => {
                let (y, mean, var) = tape.batch_norm_train(x, gamma, beta, BN_EPS);
                tape.stat_updates
                    .push((format!("{}.running_mean", self.name), mean));
                tape.stat_updates
                    .push((format!("{}.running_var", self.name), var));
                y
            }
            Mode::Eval => {
                let mean = store.buffer(&format!("{}.running_mean", self.name)).clone();
                let var = store.buffer(&format!("{}.running_var", self.name)).clone();
                tape.batch_norm_eval(x, gamma, beta, &mean, &var, BN_EPS)
            }
        }
    }
}

/// Stack of linear+BN layers with LeakyReLU between them and a projected
/// residual skip from the input to the output.
#[derive(Debug, Clone)]
pub struct MlpBn {
    pub name: String,
    layers: Vec<(Linear, BatchNorm)>,
    skip: Option<Linear>,
    /// Apply the nonlinearity after the residual add.
    activate_output: bool,
}

impl MlpBn {
    /// `dims` = [din, h1, ..., dout]; `n_layers` = dims.len() - 1.
    pub fn new(name: impl Into<String>, dims: &[usize], residual: bool, activate_output: bool) -> Self {
        let name = name.into();
        assert!(dims.len() >= 2);
        let mut layers = Vec::new();
        for i in 0..dims.len() - 1 {
            layers.push((
                Linear::new(format!("{name}.l{i}"), dims[i], dims[i + 1]),
                BatchNorm::new(format!("{name}.bn{i}"), dims[i + 1]),
            ));
        }
        let skip = if residual {
            Some(Linear::new(format!("{name}.skip"), dims[0], *dims.last().unwrap()))
        } else {
            None
        };
        MlpBn { name, layers, skip, activate_output }
    }

    pub fn init(&self, store: &mut ParameterStore, rng: &mut ChaCha8Rng) {
        for (l, bn) in &self.layers {
            l.init(store, rng);
            bn.init(store);
        }
        if let Some(s) = &self.skip {
            s.init(store, rng);
        }
    }

    pub fn forward(&self, tape: &mut Tape, store: &ParameterStore, x: Var, mode: Mode) -> Var {
        let mut h = x;
        let last = self.layers.len() - 1;
        for (i, (l, bn)) in self.layers.iter().enumerate() {
            h = l.forward(tape, store, h);
            h = bn.forward(tape, store, h, mode);
            if i < last {
                h = tape.leaky_relu(h, LEAKY_SLOPE);
            }
        }
        if let Some(s) = &self.skip {
            let r = s.forward(tape, store, x);
            h = tape.add(h, r);
        }
        if self.activate_output {
            h = tape.leaky_relu(h, LEAKY_SLOPE);
        }
        h
    }
}

/// Kernel-3 temporal convolution over the row (time) axis, same-padding by
/// edge replication, expressed as three shifted matmuls.
#[derive(Debug, Clone)]
pub struct Conv1d {
    pub name: String,
    pub cin: usize,
    pub cout: usize,
    /// Row offsets of the three taps; centered by default, strictly past
    /// rows for the causal variant.
    pub offsets: [i64; 3],
}

impl Conv1d {
    pub fn new(name: impl Into<String>, cin: usize, cout: usize) -> Self {
        Conv1d { name: name.into(), cin, cout, offsets: [-1, 0, 1] }
    }

    /// Taps look only backward in time, so stacked blocks widen the receptive
    /// field into the past of the final row.
    pub fn causal(name: impl Into<String>, cin: usize, cout: usize) -> Self {
        Conv1d { offsets: [0, 1, 2], ..Conv1d::new(name, cin, cout) }
    }

    pub fn init(&self, store: &mut ParameterStore, rng: &mut ChaCha8Rng) {
        for k in 0..3 {
            // fan-in counts all three taps
            let limit = (6.0 / (self.cin * 3 + self.cout) as f64).sqrt();
            let data = (0..self.cin * self.cout)
                .map(|_| rng.gen_range(-limit..limit))
                .collect();
            store.insert(
                &format!("{}.k{k}", self.name),
                Tensor::new(vec![self.cin, self.cout], data),
            );
        }
        store.insert(&format!("{}.b", self.name), Tensor::zeros(vec![self.cout]));
    }

    pub fn forward(&self, tape: &mut Tape, store: &ParameterStore, x: Var) -> Var {
        assert!(tape.value(x).rows() >= 1, "conv1d: empty input");
        let mut acc: Option<Var> = None;
        for (k, offset) in self.offsets.iter().enumerate() {
            let w = tape.param(
                &format!("{}.k{k}", self.name),
                store.get(&format!("{}.k{k}", self.name)),
            );
            let shifted = tape.shift_rows(x, *offset);
            let term = tape.matmul(shifted, w);
            acc = Some(match acc {
                Some(a) => tape.add(a, term),
                None => term,
            });
        }
        let b = tape.param(&format!("{}.b", self.name), store.get(&format!("{}.b", self.name)));
        tape.add_row(acc.unwrap(), b)
    }
}

/// Residual temporal convolution block: `σ(BN(conv(x)) + skip(x))` with a 1×1
/// projection skip when channel counts differ, identity skip otherwise.
#[derive(Debug, Clone)]
pub struct ConvResidualBlock {
    pub name: String,
    conv: Conv1d,
    bn: BatchNorm,
    skip: Option<Linear>,
}

impl ConvResidualBlock {
    pub fn new(name: impl Into<String>, cin: usize, cout: usize) -> Self {
        let name = name.into();
        ConvResidualBlock {
            conv: Conv1d::new(format!("{name}.conv"), cin, cout),
            bn: BatchNorm::new(format!("{name}.bn"), cout),
            skip: if cin != cout {
                Some(Linear::new(format!("{name}.skip"), cin, cout))
            } else {
                None
            },
            name,
        }
    }

    pub fn causal(name: impl Into<String>, cin: usize, cout: usize) -> Self {
        let name = name.into();
        ConvResidualBlock {
            conv: Conv1d::causal(format!("{name}.conv"), cin, cout),
            bn: BatchNorm::new(format!("{name}.bn"), cout),
            skip: if cin != cout {
                Some(Linear::new(format!("{name}.skip"), cin, cout))
            } else {
                None
            },
            name,
        }
    }

    pub fn init(&self, store: &mut ParameterStore, rng: &mut ChaCha8Rng) {
        self.conv.init(store, rng);
        self.bn.init(store);
        if let Some(s) = &self.skip {
            s.init(store, rng);
        }
    }

    pub fn forward(&self, tape: &mut Tape, store: &ParameterStore, x: Var, mode: Mode) -> Var {
        assert!(tape.value(x).rows() >= 1, "conv residual block: empty input");
        let h = self.conv.forward(tape, store, x);
        let h = self.bn.forward(tape, store, h, mode);
        let r = match &self.skip {
            Some(s) => s.forward(tape, store, x),
            None => x,
        };
        let sum = tape.add(h, r);
        tape.leaky_relu(sum, LEAKY_SLOPE)
    }
}

/// Adam optimizer state: one first/second moment slot per parameter.
#[derive(Debug, Clone, Default)]
pub struct AdamState {
    pub m: BTreeMap<String, Tensor>,
    pub v: BTreeMap<String, Tensor>,
}

#[derive(Debug, Clone, Copy)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig { lr: 1e-3, beta1: 0.9, beta2: 0.999, eps: 1e-8 }
    }
}

/// One Adam step with bias correction, `t` starting at 1. Parameters with no
/// gradient entry (or filtered out) are left untouched. A non-finite gradient
/// aborts the whole step before any parameter is modified.
pub fn adam_step(
    store: &mut ParameterStore,
    grads: &BTreeMap<String, Tensor>,
    state: &mut AdamState,
    cfg: &AdamConfig,
    t: u64,
    trainable: impl Fn(&str) -> bool,
) -> Result<()> {
    assert!(t >= 1, "adam step count starts at 1");
    for (name, g) in grads {
        if trainable(name) && g.data.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFiniteGradient { name: name.clone() });
        }
    }
    for (name, g) in grads {
        if !trainable(name) {
            continue;
        }
        let p = match store.params.get_mut(name) {
            Some(p) => p,
            None => panic!("gradient for unknown parameter {name}"),
        };
        let m = state
            .m
            .entry(name.clone())
            .or_insert_with(|| Tensor::zeros(p.shape.clone()));
        let v = state
            .v
            .entry(name.clone())
            .or_insert_with(|| Tensor::zeros(p.shape.clone()));
        let bc1 = 1.0 - cfg.beta1.powi(t as i32);
        let bc2 = 1.0 - cfg.beta2.powi(t as i32);
        for i in 0..p.data.len() {
            m.data[i] = cfg.beta1 * m.data[i] + (1.0 - cfg.beta1) * g.data[i];
            v.data[i] = cfg.beta2 * v.data[i] + (1.0 - cfg.beta2) * g.data[i] * g.data[i];
            let mhat = m.data[i] / bc1;
            let vhat = v.data[i] / bc2;
            p.data[i] -= cfg.lr * mhat / (vhat.sqrt() + cfg.eps);
        }
    }
    Ok(())
}

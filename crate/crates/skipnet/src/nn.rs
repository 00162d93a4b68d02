//! Neural building blocks on top of the tape: dense layers, masked (stacked)
//! LSTMs, attention pooling, Adam, and parameter initialization.
//!
//! Layers are pure functions of tape inputs plus bound parameters. Parameters
//! live in a [`ParamStore`] between steps and are leafed onto a fresh tape per
//! forward pass.

use indexmap::IndexMap;
use rand::Rng;

use crate::error::{Error, Result};
use crate::tensor::{Tape, Tensor, TensorId};

/// Named parameter tensors with stable (insertion) order.
#[derive(Debug, Clone, Default)]
pub struct ParamStore {
    map: IndexMap<String, Tensor>,
}

impl ParamStore {
    pub fn new() -> Self {
        ParamStore::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, value: Tensor) {
        let name = name.into();
        let prev = self.map.insert(name.clone(), value);
        assert!(prev.is_none(), "duplicate parameter name `{name}`");
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.map.get(name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.map.get_mut(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Tensor)> {
        self.map.iter()
    }

    pub fn names(&self) -> impl Iterator<Item = &String> {
        self.map.keys()
    }

    pub fn len(&self) -> usize {
        self.map.len()
    }

    pub fn is_empty(&self) -> bool {
        self.map.is_empty()
    }

    /// Total number of scalar entries.
    pub fn numel(&self) -> usize {
        self.map.values().map(Tensor::numel).sum()
    }

    /// Leaf every parameter onto the tape as a differentiable var, in order.
    pub fn bind(&self, tape: &mut Tape) -> IndexMap<String, TensorId> {
        self.map
            .iter()
            .map(|(name, value)| (name.clone(), tape.var(value.clone())))
            .collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Activation {
    Linear,
    Relu,
    Sigmoid,
}

/// `activation(x W + bias)` row-wise.
pub fn dense(
    tape: &mut Tape,
    x: TensorId,
    w: TensorId,
    bias: TensorId,
    activation: Activation,
) -> Result<TensorId> {
    let z = tape.matmul(x, w)?;
    let z = tape.add_bias_row(z, bias)?;
    Ok(match activation {
        Activation::Linear => z,
        Activation::Relu => tape.relu(z),
        Activation::Sigmoid => tape.sigmoid(z),
    })
}

/// One LSTM layer's parameters, bound to a tape.
///
/// `wx: [in x 4h]`, `wh: [h x 4h]`, `b: [4h]`; gate order is
/// (input, forget, cell, output).
#[derive(Debug, Clone, Copy)]
pub struct LstmLayer {
    pub wx: TensorId,
    pub wh: TensorId,
    pub b: TensorId,
}

/// Per-layer LSTM state, bound to a tape: `cell` and `hidden`, both `[b x h]`.
#[derive(Debug, Clone, Copy)]
pub struct LstmState {
    pub cell: TensorId,
    pub hidden: TensorId,
}

impl LstmState {
    pub fn zeros(tape: &mut Tape, batch: usize, hidden: usize) -> Self {
        LstmState {
            cell: tape.zeros(vec![batch, hidden]),
            hidden: tape.zeros(vec![batch, hidden]),
        }
    }
}

/// One unmasked LSTM step; returns the new state (`hidden` is the output).
pub fn lstm_cell(tape: &mut Tape, x: TensorId, layer: LstmLayer, state: LstmState) -> Result<LstmState> {
    let h = tape.shape(layer.wh)[0];
    let xg = tape.matmul(x, layer.wx)?;
    let hg = tape.matmul(state.hidden, layer.wh)?;
    let gates = tape.add(xg, hg)?;
    let gates = tape.add_bias_row(gates, layer.b)?;

    let i_gate = tape.slice_cols(gates, 0, h)?;
    let f_gate = tape.slice_cols(gates, h, 2 * h)?;
    let g_gate = tape.slice_cols(gates, 2 * h, 3 * h)?;
    let o_gate = tape.slice_cols(gates, 3 * h, 4 * h)?;

    let i_gate = tape.sigmoid(i_gate);
    let f_gate = tape.sigmoid(f_gate);
    let g_gate = tape.tanh(g_gate);
    let o_gate = tape.sigmoid(o_gate);

    let keep = tape.mul(f_gate, state.cell)?;
    let write = tape.mul(i_gate, g_gate)?;
    let cell = tape.add(keep, write)?;
    let cell_act = tape.tanh(cell);
    let hidden = tape.mul(o_gate, cell_act)?;
    Ok(LstmState { cell, hidden })
}

fn validate_mask(mask: &Tensor, batch: usize, steps: usize, what: &str) -> Result<()> {
    if mask.shape != [batch, steps] {
        return Err(Error::Dimension(format!(
            "{what} mask shape {:?} does not match [batch {batch}, steps {steps}]",
            mask.shape
        )));
    }
    for v in &mask.data {
        if *v != 0.0 && *v != 1.0 {
            return Err(Error::Validation(format!("{what} mask entry {v} is not 0/1")));
        }
    }
    Ok(())
}

/// Run one LSTM layer over a sequence of `[b x in]` step inputs.
///
/// In masked mode a step with `mask[row, t] = 0` passes the state through
/// unchanged and yields a zero output for that row (inputs at masked slots
/// must still be finite). With `masked = false` the recurrence consumes every
/// step as-is, which is what a fixed-length kernel does to padding.
pub fn lstm_sequence(
    tape: &mut Tape,
    inputs: &[TensorId],
    mask: &Tensor,
    layer: LstmLayer,
    init: LstmState,
    masked: bool,
) -> Result<(Vec<TensorId>, LstmState)> {
    let steps = inputs.len();
    if steps == 0 {
        return Err(Error::Contract("lstm_sequence needs at least one step".into()));
    }
    let batch = tape.shape(inputs[0])[0];
    validate_mask(mask, batch, steps, "lstm_sequence")?;

    let hidden = tape.shape(layer.wh)[0];
    let mut state = init;
    let mut outputs = Vec::with_capacity(steps);
    for (t, &x) in inputs.iter().enumerate() {
        let new = lstm_cell(tape, x, layer, state)?;
        if !masked {
            state = new;
            outputs.push(new.hidden);
            continue;
        }
        let col: Vec<f64> = (0..batch).map(|r| mask.at(r, t)).collect();
        if col.iter().all(|&m| m == 1.0) {
            state = new;
            outputs.push(new.hidden);
            continue;
        }
        let mut keep = vec![0.0; batch * hidden];
        let mut pass = vec![0.0; batch * hidden];
        for r in 0..batch {
            keep[r * hidden..(r + 1) * hidden].fill(col[r]);
            pass[r * hidden..(r + 1) * hidden].fill(1.0 - col[r]);
        }
        let keep = tape.constant(Tensor::new(keep, vec![batch, hidden]));
        let pass = tape.constant(Tensor::new(pass, vec![batch, hidden]));

        let cell_new = tape.mul(keep, new.cell)?;
        let cell_old = tape.mul(pass, state.cell)?;
        let cell = tape.add(cell_new, cell_old)?;
        let hidden_new = tape.mul(keep, new.hidden)?;
        let hidden_old = tape.mul(pass, state.hidden)?;
        let hidden_state = tape.add(hidden_new, hidden_old)?;

        state = LstmState { cell, hidden: hidden_state };
        outputs.push(hidden_new);
    }
    Ok((outputs, state))
}

/// Stack LSTM layers; layer `l + 1` consumes layer `l`'s per-step outputs.
/// Masking applies at every layer. Returns the top layer's outputs and the
/// final state of every layer.
pub fn stacked_lstm(
    tape: &mut Tape,
    inputs: &[TensorId],
    mask: &Tensor,
    layers: &[LstmLayer],
    init: &[LstmState],
    masked: bool,
) -> Result<(Vec<TensorId>, Vec<LstmState>)> {
    if layers.is_empty() || layers.len() != init.len() {
        return Err(Error::Contract(format!(
            "stacked_lstm got {} layers and {} initial states",
            layers.len(),
            init.len()
        )));
    }
    let mut finals = Vec::with_capacity(layers.len());
    let mut seq: Vec<TensorId> = inputs.to_vec();
    for (layer, &state) in layers.iter().zip(init) {
        let (outputs, last) = lstm_sequence(tape, &seq, mask, *layer, state, masked)?;
        seq = outputs;
        finals.push(last);
    }
    Ok((seq, finals))
}

/// Attention-weighted sum of per-step outputs: weights are a masked softmax
/// over `w_a . o_t + b_a`, so masked steps get weight exactly 0.
pub fn attention_pool(
    tape: &mut Tape,
    outputs: &[TensorId],
    mask: &Tensor,
    w_a: TensorId,
    b_a: TensorId,
) -> Result<TensorId> {
    let steps = outputs.len();
    if steps == 0 {
        return Err(Error::Contract("attention_pool needs at least one step".into()));
    }
    let batch = tape.shape(outputs[0])[0];
    let width = tape.shape(outputs[0])[1];
    validate_mask(mask, batch, steps, "attention_pool")?;

    let mut scores = Vec::with_capacity(steps);
    for &o in outputs {
        let s = tape.matmul(o, w_a)?;
        scores.push(tape.add_bias_row(s, b_a)?);
    }
    let scores = tape.concat_cols(&scores)?;
    let weights = tape.masked_softmax_rows(scores, mask)?;

    let mut pooled: Option<TensorId> = None;
    for (t, &o) in outputs.iter().enumerate() {
        let w_col = tape.slice_cols(weights, t, t + 1)?;
        let w_full = tape.broadcast_col(w_col, width)?;
        let term = tape.mul(w_full, o)?;
        pooled = Some(match pooled {
            None => term,
            Some(acc) => tape.add(acc, term)?,
        });
    }
    Ok(pooled.unwrap())
}

/// Mean binary cross entropy over masked-in positions (see [`Tape::bce_masked`]).
pub fn bce_masked(tape: &mut Tape, p: TensorId, labels: &Tensor, mask: &Tensor) -> Result<TensorId> {
    tape.bce_masked(p, labels, mask)
}

/// Adam optimizer state: per-parameter first/second moments plus a shared
/// step counter.
#[derive(Debug, Clone)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub t: u64,
    m: IndexMap<String, Vec<f64>>,
    v: IndexMap<String, Vec<f64>>,
}

impl Adam {
    pub fn new(lr: f64) -> Self {
        Adam { lr, beta1: 0.9, beta2: 0.999, eps: 1e-8, t: 0, m: IndexMap::new(), v: IndexMap::new() }
    }

    /// One bias-corrected update over every parameter in store order.
    pub fn step(&mut self, params: &mut ParamStore, grads: &IndexMap<String, Vec<f64>>) -> Result<()> {
        if self.lr <= 0.0 {
            return Err(Error::Config(format!("learning rate {} must be positive", self.lr)));
        }
        self.t += 1;
        let t = self.t as i32;
        let bc1 = 1.0 - self.beta1.powi(t);
        let bc2 = 1.0 - self.beta2.powi(t);
        let names: Vec<String> = params.names().cloned().collect();
        for name in names {
            let value = params.get_mut(&name).unwrap();
            let zero;
            let grad = match grads.get(&name) {
                Some(g) => {
                    if g.len() != value.numel() {
                        return Err(Error::Dimension(format!(
                            "gradient for `{name}` has {} entries, parameter has {}",
                            g.len(),
                            value.numel()
                        )));
                    }
                    g
                }
                None => {
                    zero = vec![0.0; value.numel()];
                    &zero
                }
            };
            if grad.iter().any(|g| !g.is_finite()) {
                return Err(Error::Numeric(format!("non-finite gradient for parameter `{name}`")));
            }
            let m = self.m.entry(name.clone()).or_insert_with(|| vec![0.0; value.numel()]);
            let v = self.v.entry(name.clone()).or_insert_with(|| vec![0.0; value.numel()]);
            for (((p, &g), mi), vi) in value.data.iter_mut().zip(grad).zip(m.iter_mut()).zip(v.iter_mut()) {
                *mi = self.beta1 * *mi + (1.0 - self.beta1) * g;
                *vi = self.beta2 * *vi + (1.0 - self.beta2) * g * g;
                let m_hat = *mi / bc1;
                let v_hat = *vi / bc2;
                *p -= self.lr * m_hat / (v_hat.sqrt() + self.eps);
            }
        }
        Ok(())
    }

    /// Moment buffers for persistence, in parameter order: (name, m, v).
    pub fn moments(&self) -> impl Iterator<Item = (&String, &Vec<f64>, &Vec<f64>)> {
        self.m.iter().map(move |(name, m)| (name, m, &self.v[name.as_str()]))
    }

    pub fn restore_moments(&mut self, t: u64, moments: Vec<(String, Vec<f64>, Vec<f64>)>) {
        self.t = t;
        self.m.clear();
        self.v.clear();
        for (name, m, v) in moments {
            self.m.insert(name.clone(), m);
            self.v.insert(name, v);
        }
    }
}

/// Glorot-uniform kernel: entries from `U[-l, l]`, `l = sqrt(6 / (rows + cols))`.
pub fn glorot_uniform(rng: &mut impl Rng, rows: usize, cols: usize) -> Tensor {
    let limit = (6.0 / (rows + cols) as f64).sqrt();
    let data: Vec<f64> = (0..rows * cols).map(|_| rng.gen_range(-limit..limit)).collect();
    Tensor::new(data, vec![rows, cols])
}

pub fn uniform_init(rng: &mut impl Rng, shape: Vec<usize>, lo: f64, hi: f64) -> Tensor {
    let numel: usize = shape.iter().product();
    let data: Vec<f64> = (0..numel).map(|_| rng.gen_range(lo..hi)).collect();
    Tensor::new(data, shape)
}

/// LSTM layer init: Glorot kernels, zero biases except the forget-gate slice
/// which starts at 1.0. Returns `(wx, wh, b)`.
pub fn init_lstm_params(rng: &mut impl Rng, input: usize, hidden: usize) -> (Tensor, Tensor, Tensor) {
    let wx = glorot_uniform(rng, input, 4 * hidden);
    let wh = glorot_uniform(rng, hidden, 4 * hidden);
    let mut b = Tensor::zeros(vec![4 * hidden]);
    b.data[hidden..2 * hidden].fill(1.0);
    (wx, wh, b)
}

//! The sequence regressor: embedding lookup → LSTM with mean pooling →
//! recurrent highway layers sharing one weight set → linear output.
//!
//! Gradients are derived by hand for each stage and verified against central
//! differences in the tests of this module and in the acceptance suite.

use std::collections::BTreeMap;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::corpus::TokenMode;
use crate::error::{Error, Result};
use crate::numerics::{dot, dropout_mask, sigmoid, Matrix, Rng, RmsPropState};

/// Initialization half-width for freshly drawn parameters.
pub const INIT_SCALE: f64 = 0.05;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    /// Embedding width; also the LSTM cell width and highway width.
    pub embedding_dim: usize,
    pub rhn_depth: usize,
    pub dropout_lstm: f64,
    pub dropout_rhn: f64,
    pub token_mode: TokenMode,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            embedding_dim: 50,
            rhn_depth: 10,
            dropout_lstm: 0.2,
            dropout_rhn: 0.5,
            token_mode: TokenMode::Word,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.embedding_dim == 0 || self.rhn_depth == 0 {
            return Err(Error::InvalidArgument(
                "embedding_dim and rhn_depth must be >= 1".into(),
            ));
        }
        for r in [self.dropout_lstm, self.dropout_rhn] {
            if !(0.0..1.0).contains(&r) {
                return Err(Error::InvalidArgument(format!("dropout rate {r} not in [0, 1)")));
            }
        }
        Ok(())
    }
}

/// Input map, recurrent map and bias of one LSTM gate.
#[derive(Clone, Debug, PartialEq)]
pub struct Gate {
    pub input: Matrix,
    pub recurrent: Matrix,
    pub bias: Matrix,
}

impl Gate {
    fn zeros(d: usize) -> Self {
        Gate {
            input: Matrix::zeros(d, d),
            recurrent: Matrix::zeros(d, d),
            bias: Matrix::zeros(d, 1),
        }
    }

    fn uniform(d: usize, scale: f64, rng: &mut Rng) -> Self {
        Gate {
            input: Matrix::uniform(d, d, scale, rng),
            recurrent: Matrix::uniform(d, d, scale, rng),
            bias: Matrix::uniform(d, 1, scale, rng),
        }
    }

    /// `W x + U h + b`
    fn preactivation(&self, x: &[f64], h_prev: &[f64]) -> Vec<f64> {
        let mut z = self.bias.as_slice().to_vec();
        self.input.matvec_acc(x, &mut z);
        self.recurrent.matvec_acc(h_prev, &mut z);
        z
    }

    fn accumulate(&mut self, dz: &[f64], x: &[f64], h_prev: &[f64]) {
        self.input.add_outer(dz, x);
        self.recurrent.add_outer(dz, h_prev);
        for (b, g) in self.bias.as_mut_slice().iter_mut().zip(dz) {
            *b += g;
        }
    }

    fn tensors(&self) -> [&Matrix; 3] {
        [&self.input, &self.recurrent, &self.bias]
    }

    fn tensors_mut(&mut self) -> [&mut Matrix; 3] {
        [&mut self.input, &mut self.recurrent, &mut self.bias]
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct LstmParams {
    pub input_gate: Gate,
    pub forget_gate: Gate,
    pub output_gate: Gate,
    pub candidate: Gate,
}

impl LstmParams {
    pub fn zeros(d: usize) -> Self {
        LstmParams {
            input_gate: Gate::zeros(d),
            forget_gate: Gate::zeros(d),
            output_gate: Gate::zeros(d),
            candidate: Gate::zeros(d),
        }
    }

    fn uniform(d: usize, scale: f64, rng: &mut Rng) -> Self {
        LstmParams {
            input_gate: Gate::uniform(d, scale, rng),
            forget_gate: Gate::uniform(d, scale, rng),
            output_gate: Gate::uniform(d, scale, rng),
            candidate: Gate::uniform(d, scale, rng),
        }
    }

    fn gates(&self) -> [&Gate; 4] {
        [&self.input_gate, &self.forget_gate, &self.output_gate, &self.candidate]
    }

    fn gates_mut(&mut self) -> [&mut Gate; 4] {
        [
            &mut self.input_gate,
            &mut self.forget_gate,
            &mut self.output_gate,
            &mut self.candidate,
        ]
    }

    pub fn dim(&self) -> usize {
        self.input_gate.bias.rows()
    }
}

/// One shared set of highway weights, reused at every depth.
#[derive(Clone, Debug, PartialEq)]
pub struct RhnParams {
    pub transform: Matrix,
    pub transform_bias: Matrix,
    pub gate: Matrix,
    pub gate_bias: Matrix,
}

impl RhnParams {
    pub fn zeros(d: usize) -> Self {
        RhnParams {
            transform: Matrix::zeros(d, d),
            transform_bias: Matrix::zeros(d, 1),
            gate: Matrix::zeros(d, d),
            gate_bias: Matrix::zeros(d, 1),
        }
    }

    fn uniform(d: usize, scale: f64, rng: &mut Rng) -> Self {
        RhnParams {
            transform: Matrix::uniform(d, d, scale, rng),
            transform_bias: Matrix::uniform(d, 1, scale, rng),
            gate: Matrix::uniform(d, d, scale, rng),
            gate_bias: Matrix::uniform(d, 1, scale, rng),
        }
    }

    pub fn parameter_count(&self) -> usize {
        self.transform.len() + self.transform_bias.len() + self.gate.len() + self.gate_bias.len()
    }
}

/// Every learnable tensor of the network.
#[derive(Clone, Debug, PartialEq)]
pub struct LdRnnParams {
    /// `d × |V|`; column `k` embeds token `k`.
    pub embedding: Matrix,
    pub lstm: LstmParams,
    pub rhn: RhnParams,
    /// `1 × d`
    pub regressor_weight: Matrix,
    /// `1 × 1`
    pub regressor_bias: Matrix,
    /// `|V| × d` next-token output weights, used only by language-model pre-training.
    pub lm_output: Matrix,
}

/// Tensor names in canonical order; checkpoint files and optimizers use it.
pub const TENSOR_NAMES: [&str; 20] = [
    "embedding",
    "lstm.input_gate.input",
    "lstm.input_gate.recurrent",
    "lstm.input_gate.bias",
    "lstm.forget_gate.input",
    "lstm.forget_gate.recurrent",
    "lstm.forget_gate.bias",
    "lstm.output_gate.input",
    "lstm.output_gate.recurrent",
    "lstm.output_gate.bias",
    "lstm.candidate.input",
    "lstm.candidate.recurrent",
    "lstm.candidate.bias",
    "rhn.transform",
    "rhn.transform_bias",
    "rhn.gate",
    "rhn.gate_bias",
    "regressor.weight",
    "regressor.bias",
    "lm_output",
];

impl LdRnnParams {
    pub fn zeros(d: usize, vocab_size: usize) -> Self {
        LdRnnParams {
            embedding: Matrix::zeros(d, vocab_size),
            lstm: LstmParams::zeros(d),
            rhn: RhnParams::zeros(d),
            regressor_weight: Matrix::zeros(1, d),
            regressor_bias: Matrix::zeros(1, 1),
            lm_output: Matrix::zeros(vocab_size, d),
        }
    }

    /// Uniform(−0.05, 0.05) initialization.
    pub fn init(d: usize, vocab_size: usize, rng: &mut Rng) -> Self {
        Self::init_with_scale(d, vocab_size, INIT_SCALE, rng)
    }

    pub fn init_with_scale(d: usize, vocab_size: usize, scale: f64, rng: &mut Rng) -> Self {
        LdRnnParams {
            embedding: Matrix::uniform(d, vocab_size, scale, rng),
            lstm: LstmParams::uniform(d, scale, rng),
            rhn: RhnParams::uniform(d, scale, rng),
            regressor_weight: Matrix::uniform(1, d, scale, rng),
            regressor_bias: Matrix::uniform(1, 1, scale, rng),
            lm_output: Matrix::uniform(vocab_size, d, scale, rng),
        }
    }

    pub fn dim(&self) -> usize {
        self.embedding.rows()
    }

    pub fn vocab_size(&self) -> usize {
        self.embedding.cols()
    }

    pub fn tensors(&self) -> Vec<&Matrix> {
        let mut v = vec![&self.embedding];
        for g in self.lstm.gates() {
            v.extend(g.tensors());
        }
        v.extend([
            &self.rhn.transform,
            &self.rhn.transform_bias,
            &self.rhn.gate,
            &self.rhn.gate_bias,
            &self.regressor_weight,
            &self.regressor_bias,
            &self.lm_output,
        ]);
        v
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut Matrix> {
        let mut v = vec![&mut self.embedding];
        for g in self.lstm.gates_mut() {
            v.extend(g.tensors_mut());
        }
        v.extend([
            &mut self.rhn.transform,
            &mut self.rhn.transform_bias,
            &mut self.rhn.gate,
            &mut self.rhn.gate_bias,
            &mut self.regressor_weight,
            &mut self.regressor_bias,
            &mut self.lm_output,
        ]);
        v
    }

    pub fn named_tensors(&self) -> Vec<(&'static str, &Matrix)> {
        TENSOR_NAMES.iter().copied().zip(self.tensors()).collect()
    }

    pub fn is_finite(&self) -> bool {
        self.tensors().iter().all(|t| t.is_finite())
    }

    /// Copies the embedding, LSTM and next-token weights from `other`.
    pub fn copy_lower_layers(&mut self, other: &LdRnnParams) -> Result<()> {
        if self.embedding.shape() != other.embedding.shape() {
            return Err(Error::Checkpoint(format!(
                "embedding shape {:?} does not match {:?}",
                other.embedding.shape(),
                self.embedding.shape()
            )));
        }
        self.embedding = other.embedding.clone();
        self.lstm = other.lstm.clone();
        self.lm_output = other.lm_output.clone();
        Ok(())
    }
}

/// Per-token d-vectors keyed by token id; the sparse part of a gradient.
pub type TokenRows = BTreeMap<usize, Vec<f64>>;

fn add_token_rows(into: &mut TokenRows, from: &TokenRows) {
    for (&k, v) in from {
        let e = into.entry(k).or_insert_with(|| vec![0.0; v.len()]);
        for (a, b) in e.iter_mut().zip(v) {
            *a += b;
        }
    }
}

/// Gradient of a loss with respect to [`LdRnnParams`]. Embedding columns and
/// next-token rows are stored sparsely; untouched tokens have zero gradient.
#[derive(Clone, Debug, PartialEq)]
pub struct Gradients {
    pub embedding: TokenRows,
    pub lstm: LstmParams,
    pub rhn: RhnParams,
    pub regressor_weight: Matrix,
    pub regressor_bias: Matrix,
    pub lm_output: TokenRows,
}

impl Gradients {
    pub fn zeros(d: usize) -> Self {
        Gradients {
            embedding: TokenRows::new(),
            lstm: LstmParams::zeros(d),
            rhn: RhnParams::zeros(d),
            regressor_weight: Matrix::zeros(1, d),
            regressor_bias: Matrix::zeros(1, 1),
            lm_output: TokenRows::new(),
        }
    }

    pub fn add_assign(&mut self, other: &Gradients) {
        add_token_rows(&mut self.embedding, &other.embedding);
        add_token_rows(&mut self.lm_output, &other.lm_output);
        for (a, b) in self.lstm.gates_mut().into_iter().zip(other.lstm.gates()) {
            for (x, y) in a.tensors_mut().into_iter().zip(b.tensors()) {
                x.add_assign(y);
            }
        }
        self.rhn.transform.add_assign(&other.rhn.transform);
        self.rhn.transform_bias.add_assign(&other.rhn.transform_bias);
        self.rhn.gate.add_assign(&other.rhn.gate);
        self.rhn.gate_bias.add_assign(&other.rhn.gate_bias);
        self.regressor_weight.add_assign(&other.regressor_weight);
        self.regressor_bias.add_assign(&other.regressor_bias);
    }

    /// Dense view shaped like `params`.
    pub fn to_dense(&self, vocab_size: usize) -> LdRnnParams {
        let d = self.regressor_weight.cols();
        let mut out = LdRnnParams::zeros(d, vocab_size);
        for (&k, col) in &self.embedding {
            for (r, &v) in col.iter().enumerate() {
                out.embedding.set(r, k, v);
            }
        }
        for (&k, row) in &self.lm_output {
            out.lm_output.row_mut(k).copy_from_slice(row);
        }
        out.lstm = self.lstm.clone();
        out.rhn = self.rhn.clone();
        out.regressor_weight = self.regressor_weight.clone();
        out.regressor_bias = self.regressor_bias.clone();
        out
    }

    pub fn is_finite(&self) -> bool {
        let rows_ok = |m: &TokenRows| m.values().all(|v| v.iter().all(|x| x.is_finite()));
        rows_ok(&self.embedding)
            && rows_ok(&self.lm_output)
            && self.lstm.gates().iter().all(|g| g.tensors().iter().all(|t| t.is_finite()))
            && self.rhn.transform.is_finite()
            && self.rhn.transform_bias.is_finite()
            && self.rhn.gate.is_finite()
            && self.rhn.gate_bias.is_finite()
            && self.regressor_weight.is_finite()
            && self.regressor_bias.is_finite()
    }
}

/// Which tensors an optimizer step touches.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum TrainScope {
    /// Embedding, LSTM, highway and regressor.
    Supervised,
    /// Embedding, LSTM and next-token output weights.
    LanguageModel,
}

impl TrainScope {
    fn includes(self, name: &str) -> bool {
        match self {
            TrainScope::Supervised => name != "lm_output",
            TrainScope::LanguageModel => {
                name == "embedding" || name == "lm_output" || name.starts_with("lstm.")
            }
        }
    }
}

/// RMSprop over every tensor in a [`TrainScope`].
#[derive(Clone, Debug)]
pub struct Optimizer {
    scope: TrainScope,
    states: Vec<Option<RmsPropState>>,
}

impl Optimizer {
    pub fn new(params: &LdRnnParams, scope: TrainScope, lr: f64, decay: f64, eps: f64) -> Self {
        let states = params
            .named_tensors()
            .into_iter()
            .map(|(name, t)| scope.includes(name).then(|| RmsPropState::for_tensor(t, lr, decay, eps)))
            .collect();
        Optimizer { scope, states }
    }

    pub fn scope(&self) -> TrainScope {
        self.scope
    }

    pub fn step(&mut self, params: &mut LdRnnParams, grads: &Gradients) -> Result<()> {
        if !grads.is_finite() {
            return Err(Error::GradientBlowUp("batch gradient".into()));
        }
        let dense = grads.to_dense(params.vocab_size());
        for ((state, p), (name, g)) in self
            .states
            .iter_mut()
            .zip(params.tensors_mut())
            .zip(dense.named_tensors())
        {
            if let Some(state) = state {
                state
                    .step(p, g)
                    .map_err(|_| Error::GradientBlowUp(name.to_string()))?;
            }
        }
        Ok(())
    }
}

/// Dropout masks for one training pass over one sequence.
#[derive(Clone, Debug, PartialEq)]
pub struct DropoutMasks {
    pub lstm_input: Vec<Vec<f64>>,
    pub lstm_output: Vec<Vec<f64>>,
    pub rhn_output: Vec<f64>,
}

impl DropoutMasks {
    pub fn sample(n: usize, d: usize, cfg: &ModelConfig, rng: &mut Rng) -> Self {
        let rows = |rate: f64, rng: &mut Rng| -> Vec<Vec<f64>> {
            let m = dropout_mask(n, d, rate, rng);
            (0..n).map(|t| m.row(t).to_vec()).collect()
        };
        let lstm_input = rows(cfg.dropout_lstm, rng);
        let lstm_output = rows(cfg.dropout_lstm, rng);
        let rhn_output = dropout_mask(1, d, cfg.dropout_rhn, rng).into_vec();
        DropoutMasks {
            lstm_input,
            lstm_output,
            rhn_output,
        }
    }
}

/// Embedding lookup. Ids must already be mapped into the vocabulary.
pub fn embed(token_ids: &[usize], embedding: &Matrix) -> Result<Vec<Vec<f64>>> {
    let size = embedding.cols();
    token_ids
        .iter()
        .map(|&id| {
            if id >= size {
                Err(Error::IdOutOfRange { id, size })
            } else {
                Ok(embedding.column(id))
            }
        })
        .collect()
}

fn hadamard(a: &[f64], b: &[f64]) -> Vec<f64> {
    a.iter().zip(b).map(|(x, y)| x * y).collect()
}

/// Forward state of one LSTM step.
#[derive(Clone, Debug)]
pub struct LstmStep {
    x: Vec<f64>,
    i: Vec<f64>,
    f: Vec<f64>,
    o: Vec<f64>,
    g: Vec<f64>,
    c: Vec<f64>,
    tanh_c: Vec<f64>,
    /// Raw output state, before output dropout.
    pub h: Vec<f64>,
}

#[derive(Clone, Debug)]
pub struct LstmTrace {
    pub steps: Vec<LstmStep>,
    /// Output states after output dropout; these feed pooling.
    pub outputs: Vec<Vec<f64>>,
}

/// Runs the LSTM over `inputs` from zero initial state. Masks, when given,
/// multiply the inputs and the emitted output states (not the recurrence).
pub fn lstm_encode(
    inputs: &[Vec<f64>],
    lstm: &LstmParams,
    masks: Option<(&[Vec<f64>], &[Vec<f64>])>,
) -> LstmTrace {
    let d = lstm.dim();
    let mut h_prev = vec![0.0; d];
    let mut c_prev = vec![0.0; d];
    let mut steps = Vec::with_capacity(inputs.len());
    let mut outputs = Vec::with_capacity(inputs.len());
    for (t, input) in inputs.iter().enumerate() {
        let x = match masks {
            Some((m_in, _)) => hadamard(input, &m_in[t]),
            None => input.clone(),
        };
        let i: Vec<f64> = lstm.input_gate.preactivation(&x, &h_prev).into_iter().map(sigmoid).collect();
        let f: Vec<f64> = lstm.forget_gate.preactivation(&x, &h_prev).into_iter().map(sigmoid).collect();
        let o: Vec<f64> = lstm.output_gate.preactivation(&x, &h_prev).into_iter().map(sigmoid).collect();
        let g: Vec<f64> = lstm.candidate.preactivation(&x, &h_prev).into_iter().map(f64::tanh).collect();
        let c: Vec<f64> = (0..d).map(|k| f[k] * c_prev[k] + i[k] * g[k]).collect();
        let tanh_c: Vec<f64> = c.iter().map(|v| v.tanh()).collect();
        let h: Vec<f64> = (0..d).map(|k| o[k] * tanh_c[k]).collect();
        outputs.push(match masks {
            Some((_, m_out)) => hadamard(&h, &m_out[t]),
            None => h.clone(),
        });
        h_prev.clone_from(&h);
        c_prev.clone_from(&c);
        steps.push(LstmStep { x, i, f, o, g, c, tanh_c, h });
    }
    LstmTrace { steps, outputs }
}

/// Backpropagation through time. `d_outputs[t]` is the loss gradient with
/// respect to the (post-dropout) output `t`. Accumulates weight gradients into
/// `grads` and returns gradients with respect to the un-masked inputs.
pub fn lstm_backward(
    trace: &LstmTrace,
    lstm: &LstmParams,
    d_outputs: &[Vec<f64>],
    masks: Option<(&[Vec<f64>], &[Vec<f64>])>,
    grads: &mut LstmParams,
) -> Vec<Vec<f64>> {
    let d = lstm.dim();
    let n = trace.steps.len();
    let zeros = vec![0.0; d];
    let mut dh_next = vec![0.0; d];
    let mut dc_next = vec![0.0; d];
    let mut d_inputs = vec![Vec::new(); n];
    for t in (0..n).rev() {
        let s = &trace.steps[t];
        let h_prev = if t > 0 { &trace.steps[t - 1].h } else { &zeros };
        let c_prev = if t > 0 { &trace.steps[t - 1].c } else { &zeros };
        let mut dh = match masks {
            Some((_, m_out)) => hadamard(&d_outputs[t], &m_out[t]),
            None => d_outputs[t].clone(),
        };
        for k in 0..d {
            dh[k] += dh_next[k];
        }
        let mut dz_i = vec![0.0; d];
        let mut dz_f = vec![0.0; d];
        let mut dz_o = vec![0.0; d];
        let mut dz_g = vec![0.0; d];
        for k in 0..d {
            let d_o = dh[k] * s.tanh_c[k];
            let dc = dh[k] * s.o[k] * (1.0 - s.tanh_c[k] * s.tanh_c[k]) + dc_next[k];
            let d_i = dc * s.g[k];
            let d_g = dc * s.i[k];
            let d_f = dc * c_prev[k];
            dc_next[k] = dc * s.f[k];
            dz_i[k] = d_i * s.i[k] * (1.0 - s.i[k]);
            dz_f[k] = d_f * s.f[k] * (1.0 - s.f[k]);
            dz_o[k] = d_o * s.o[k] * (1.0 - s.o[k]);
            dz_g[k] = d_g * (1.0 - s.g[k] * s.g[k]);
        }
        let mut dx = vec![0.0; d];
        let mut dh_prev = vec![0.0; d];
        for (gate, grad, dz) in [
            (&lstm.input_gate, &mut grads.input_gate, &dz_i),
            (&lstm.forget_gate, &mut grads.forget_gate, &dz_f),
            (&lstm.output_gate, &mut grads.output_gate, &dz_o),
            (&lstm.candidate, &mut grads.candidate, &dz_g),
        ] {
            grad.accumulate(dz, &s.x, h_prev);
            gate.input.matvec_t_acc(dz, &mut dx);
            gate.recurrent.matvec_t_acc(dz, &mut dh_prev);
        }
        dh_next = dh_prev;
        d_inputs[t] = match masks {
            Some((m_in, _)) => hadamard(&dx, &m_in[t]),
            None => dx,
        };
    }
    d_inputs
}

/// Arithmetic mean over time steps.
pub fn mean_pool(states: &[Vec<f64>]) -> Result<Vec<f64>> {
    let first = states.first().ok_or(Error::EmptyInput("mean_pool"))?;
    let mut out = vec![0.0; first.len()];
    for s in states {
        for (o, v) in out.iter_mut().zip(s) {
            *o += v;
        }
    }
    let n = states.len() as f64;
    out.iter_mut().for_each(|o| *o /= n);
    Ok(out)
}

#[derive(Clone, Debug)]
struct RhnLayer {
    h: Vec<f64>,
    gate: Vec<f64>,
    transform: Vec<f64>,
}

#[derive(Clone, Debug)]
pub struct RhnTrace {
    layers: Vec<RhnLayer>,
    /// Output after the last layer and after dropout.
    pub output: Vec<f64>,
}

/// `depth` highway layers with the same weights:
/// `α = σ(W_α h + b_α); h ← α⊙h + (1−α)⊙tanh(W_σ h + b_σ)`.
pub fn rhn_forward(h: &[f64], rhn: &RhnParams, depth: usize, mask: Option<&[f64]>) -> RhnTrace {
    let mut cur = h.to_vec();
    let mut layers = Vec::with_capacity(depth);
    for _ in 0..depth {
        let mut za = rhn.gate_bias.as_slice().to_vec();
        rhn.gate.matvec_acc(&cur, &mut za);
        let mut zs = rhn.transform_bias.as_slice().to_vec();
        rhn.transform.matvec_acc(&cur, &mut zs);
        let gate: Vec<f64> = za.into_iter().map(sigmoid).collect();
        let transform: Vec<f64> = zs.into_iter().map(f64::tanh).collect();
        let next: Vec<f64> = (0..cur.len())
            .map(|k| gate[k] * cur[k] + (1.0 - gate[k]) * transform[k])
            .collect();
        layers.push(RhnLayer {
            h: std::mem::replace(&mut cur, next),
            gate,
            transform,
        });
    }
    let output = match mask {
        Some(m) => hadamard(&cur, m),
        None => cur,
    };
    RhnTrace { layers, output }
}

/// Returns the gradient with respect to the highway input.
pub fn rhn_backward(
    trace: &RhnTrace,
    rhn: &RhnParams,
    d_output: &[f64],
    mask: Option<&[f64]>,
    grads: &mut RhnParams,
) -> Vec<f64> {
    let mut dh = match mask {
        Some(m) => hadamard(d_output, m),
        None => d_output.to_vec(),
    };
    for layer in trace.layers.iter().rev() {
        let d = dh.len();
        let mut dza = vec![0.0; d];
        let mut dzs = vec![0.0; d];
        let mut dh_prev = vec![0.0; d];
        for k in 0..d {
            let a = layer.gate[k];
            let s = layer.transform[k];
            dza[k] = dh[k] * (layer.h[k] - s) * a * (1.0 - a);
            dzs[k] = dh[k] * (1.0 - a) * (1.0 - s * s);
            dh_prev[k] = dh[k] * a;
        }
        grads.gate.add_outer(&dza, &layer.h);
        grads.transform.add_outer(&dzs, &layer.h);
        for k in 0..d {
            grads.gate_bias.as_mut_slice()[k] += dza[k];
            grads.transform_bias.as_mut_slice()[k] += dzs[k];
        }
        rhn.gate.matvec_t_acc(&dza, &mut dh_prev);
        rhn.transform.matvec_t_acc(&dzs, &mut dh_prev);
        dh = dh_prev;
    }
    dh
}

/// Everything computed by one forward pass.
#[derive(Clone, Debug)]
pub struct ForwardPass {
    pub lstm: LstmTrace,
    pub pooled: Vec<f64>,
    pub rhn: RhnTrace,
    pub prediction: f64,
}

/// Full forward pass. `masks = None` is inference.
pub fn forward_pass(
    token_ids: &[usize],
    params: &LdRnnParams,
    cfg: &ModelConfig,
    masks: Option<&DropoutMasks>,
) -> Result<ForwardPass> {
    if token_ids.is_empty() {
        return Err(Error::EmptyInput("token sequence"));
    }
    let inputs = embed(token_ids, &params.embedding)?;
    let lstm_masks = masks.map(|m| (m.lstm_input.as_slice(), m.lstm_output.as_slice()));
    let lstm = lstm_encode(&inputs, &params.lstm, lstm_masks);
    let pooled = mean_pool(&lstm.outputs)?;
    let rhn = rhn_forward(&pooled, &params.rhn, cfg.rhn_depth, masks.map(|m| m.rhn_output.as_slice()));
    let prediction = dot(params.regressor_weight.as_slice(), &rhn.output) + params.regressor_bias.get(0, 0);
    if !prediction.is_finite() {
        return Err(Error::NumericOverflow("non-finite prediction".into()));
    }
    Ok(ForwardPass {
        lstm,
        pooled,
        rhn,
        prediction,
    })
}

/// Raw prediction; `rng = Some(..)` samples dropout masks (training mode).
pub fn forward(
    token_ids: &[usize],
    params: &LdRnnParams,
    cfg: &ModelConfig,
    rng: Option<&mut Rng>,
) -> Result<f64> {
    let masks = rng.map(|r| DropoutMasks::sample(token_ids.len(), params.dim(), cfg, r));
    Ok(forward_pass(token_ids, params, cfg, masks.as_ref())?.prediction)
}

/// Inference prediction clamped at zero.
pub fn estimate_points(token_ids: &[usize], params: &LdRnnParams, cfg: &ModelConfig) -> Result<f64> {
    Ok(forward(token_ids, params, cfg, None)?.max(0.0))
}

/// Mean-pooled LSTM representation at inference.
pub fn pooled_features(token_ids: &[usize], params: &LdRnnParams) -> Result<Vec<f64>> {
    if token_ids.is_empty() {
        return Err(Error::EmptyInput("token sequence"));
    }
    let inputs = embed(token_ids, &params.embedding)?;
    mean_pool(&lstm_encode(&inputs, &params.lstm, None).outputs)
}

/// Squared error and its derivative with respect to the prediction.
pub fn loss(prediction: f64, target: f64) -> (f64, f64) {
    let e = prediction - target;
    (e * e, 2.0 * e)
}

/// Loss and gradients for one issue, with the gradient multiplied by `scale`.
pub fn issue_gradient(
    token_ids: &[usize],
    target: f64,
    params: &LdRnnParams,
    cfg: &ModelConfig,
    masks: Option<&DropoutMasks>,
    scale: f64,
) -> Result<(f64, Gradients)> {
    let fp = forward_pass(token_ids, params, cfg, masks)?;
    let (l, dl) = loss(fp.prediction, target);
    let dy = dl * scale;
    let d = params.dim();
    let mut g = Gradients::zeros(d);

    for (gw, &r) in g.regressor_weight.as_mut_slice().iter_mut().zip(&fp.rhn.output) {
        *gw = dy * r;
    }
    g.regressor_bias.set(0, 0, dy);
    let d_rhn_out: Vec<f64> = params.regressor_weight.as_slice().iter().map(|w| w * dy).collect();
    let d_pooled = rhn_backward(
        &fp.rhn,
        &params.rhn,
        &d_rhn_out,
        masks.map(|m| m.rhn_output.as_slice()),
        &mut g.rhn,
    );
    let n = token_ids.len() as f64;
    let d_step: Vec<f64> = d_pooled.iter().map(|v| v / n).collect();
    let d_outputs = vec![d_step; token_ids.len()];
    let lstm_masks = masks.map(|m| (m.lstm_input.as_slice(), m.lstm_output.as_slice()));
    let d_inputs = lstm_backward(&fp.lstm, &params.lstm, &d_outputs, lstm_masks, &mut g.lstm);
    accumulate_embedding(&mut g.embedding, token_ids, &d_inputs);

    if !l.is_finite() || !g.is_finite() {
        return Err(Error::NumericOverflow("non-finite gradient".into()));
    }
    Ok((l, g))
}

pub(crate) fn accumulate_embedding(rows: &mut TokenRows, token_ids: &[usize], d_inputs: &[Vec<f64>]) {
    for (&id, dx) in token_ids.iter().zip(d_inputs) {
        let e = rows.entry(id).or_insert_with(|| vec![0.0; dx.len()]);
        for (a, b) in e.iter_mut().zip(dx) {
            *a += b;
        }
    }
}

/// One labeled training example.
#[derive(Clone, Debug, PartialEq)]
pub struct Example {
    pub token_ids: Vec<usize>,
    pub target: f64,
}

/// Fixed chunk size for the parallel gradient reduction. Chunk boundaries do
/// not depend on the thread count, so the summation order is fixed.
const REDUCE_CHUNK: usize = 8;

/// Mean squared-error loss and its exact gradient over `batch`.
///
/// With `rng = Some(..)` dropout masks are drawn for every example in batch
/// order before any gradient work starts.
pub fn batch_gradient(
    batch: &[&Example],
    params: &LdRnnParams,
    cfg: &ModelConfig,
    rng: Option<&mut Rng>,
) -> Result<(f64, Gradients)> {
    if batch.is_empty() {
        return Err(Error::EmptyInput("batch"));
    }
    let d = params.dim();
    let masks: Vec<Option<DropoutMasks>> = match rng {
        Some(r) => batch
            .iter()
            .map(|ex| Some(DropoutMasks::sample(ex.token_ids.len(), d, cfg, r)))
            .collect(),
        None => vec![None; batch.len()],
    };
    let scale = 1.0 / batch.len() as f64;
    let items: Vec<(&Example, &Option<DropoutMasks>)> = batch.iter().copied().zip(&masks).collect();
    let partials: Vec<Result<(f64, Gradients)>> = items
        .par_chunks(REDUCE_CHUNK)
        .map(|chunk| {
            let mut total = 0.0;
            let mut g = Gradients::zeros(d);
            for (ex, m) in chunk {
                let (l, gi) = issue_gradient(&ex.token_ids, ex.target, params, cfg, m.as_ref(), scale)?;
                total += l;
                g.add_assign(&gi);
            }
            Ok((total, g))
        })
        .collect();
    let mut total = 0.0;
    let mut grads = Gradients::zeros(d);
    for p in partials {
        let (l, g) = p?;
        total += l;
        grads.add_assign(&g);
    }
    Ok((total * scale, grads))
}

/// Which stage produced a checkpoint.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Stage {
    Pretrained,
    Trained,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TensorRecord {
    pub name: String,
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f64>,
}

pub const CHECKPOINT_FORMAT: &str = "ldrnn-checkpoint";
pub const CHECKPOINT_VERSION: u32 = 1;

/// Versioned structured-text container for model parameters.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub format: String,
    pub version: u32,
    pub stage: Stage,
    pub config: ModelConfig,
    pub vocab_hash: String,
    pub vocab_size: usize,
    pub tensors: Vec<TensorRecord>,
}

impl Checkpoint {
    pub fn new(stage: Stage, config: &ModelConfig, vocab_hash: &str, params: &LdRnnParams) -> Self {
        Checkpoint {
            format: CHECKPOINT_FORMAT.into(),
            version: CHECKPOINT_VERSION,
            stage,
            config: config.clone(),
            vocab_hash: vocab_hash.into(),
            vocab_size: params.vocab_size(),
            tensors: params
                .named_tensors()
                .into_iter()
                .map(|(name, t)| TensorRecord {
                    name: name.into(),
                    rows: t.rows(),
                    cols: t.cols(),
                    data: t.as_slice().to_vec(),
                })
                .collect(),
        }
    }

    /// Rebuilds the parameters, rejecting any name, shape or width mismatch.
    pub fn params(&self) -> Result<LdRnnParams> {
        if self.format != CHECKPOINT_FORMAT || self.version != CHECKPOINT_VERSION {
            return Err(Error::Checkpoint(format!(
                "unsupported container {} v{}",
                self.format, self.version
            )));
        }
        let d = self.config.embedding_dim;
        let v = self.vocab_size;
        let mut params = LdRnnParams::zeros(d, v);
        if self.tensors.len() != TENSOR_NAMES.len() {
            return Err(Error::Checkpoint(format!(
                "expected {} tensors, found {}",
                TENSOR_NAMES.len(),
                self.tensors.len()
            )));
        }
        for ((rec, name), slot) in self.tensors.iter().zip(TENSOR_NAMES).zip(params.tensors_mut()) {
            if rec.name != name {
                return Err(Error::Checkpoint(format!("expected tensor {name}, found {}", rec.name)));
            }
            if (rec.rows, rec.cols) != slot.shape() {
                return Err(Error::Checkpoint(format!(
                    "tensor {name} has shape {}x{}, expected {:?} for d={d}, |V|={v}",
                    rec.rows,
                    rec.cols,
                    slot.shape()
                )));
            }
            *slot = Matrix::from_vec(rec.rows, rec.cols, rec.data.clone())
                .map_err(|e| Error::Checkpoint(format!("tensor {name}: {e}")))?;
        }
        if !params.is_finite() {
            return Err(Error::Checkpoint("non-finite parameter values".into()));
        }
        Ok(params)
    }

    pub fn require_vocab(&self, vocab_hash: &str) -> Result<()> {
        if self.vocab_hash != vocab_hash {
            return Err(Error::VocabularyMismatch {
                expected: self.vocab_hash.clone(),
                actual: vocab_hash.into(),
            });
        }
        Ok(())
    }

    pub fn to_json(&self) -> Result<String> {
        let mut s = serde_json::to_string(self)?;
        s.push('\n');
        Ok(s)
    }

    pub fn save(&self, path: &std::path::Path) -> Result<()> {
        std::fs::write(path, self.to_json()?).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &std::path::Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let ck: Checkpoint = serde_json::from_str(&text)?;
        ck.params()?;
        Ok(ck)
    }
}

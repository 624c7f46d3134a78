//! Dual-stage attention encoder–decoder forecaster.
//!
//! The model maps a window of `T` exogenous feature vectors plus the `T`
//! past loads to a single forecast `L` steps past the window. Structure:
//!
//! * input attention: per-step softmax weights over the feature channels,
//!   produced by a two-layer tanh MLP queried with the top encoder state;
//! * stacked LSTM encoder over the reweighted inputs;
//! * temporal attention: per-decoder-step softmax weights over the `T`
//!   encoder hidden states, same MLP shape;
//! * a projection that folds the context vector and the past load into the
//!   scalar decoder input, a stacked LSTM decoder, and a two-layer ReLU
//!   head over `[decoder state; context]`.
//!
//! Parameters live in one flat vector whose block order is fixed by
//! [`Layout`]: attention-MLP + encoder blocks first, then decoder-side
//! blocks, so the shared/personalized split `θ = [φ, ψ]` is a plain index
//! boundary.

use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;
use core::fmt;
use core::ops::Range;

use rand::Rng;

use crate::autodiff::{Shape, Tape, TensorError, TensorId};

#[derive(Debug, Clone, PartialEq)]
pub enum ModelError {
    Tensor(TensorError),
    /// A batch or sample does not conform to the model dimensions.
    BadInput { what: &'static str, expected: usize, got: usize },
    /// Flat parameter vector length does not match the layout.
    BadParamLength { expected: usize, got: usize },
    NoFeatures,
}

impl fmt::Display for ModelError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            ModelError::Tensor(e) => write!(f, "{e}"),
            ModelError::BadInput { what, expected, got } => {
                write!(f, "malformed input: {what} expected {expected}, got {got}")
            }
            ModelError::BadParamLength { expected, got } => {
                write!(f, "parameter vector has {got} values, layout requires {expected}")
            }
            ModelError::NoFeatures => write!(f, "input attention requires at least one feature"),
        }
    }
}

impl core::error::Error for ModelError {}

impl From<TensorError> for ModelError {
    fn from(e: TensorError) -> Self {
        ModelError::Tensor(e)
    }
}

/// Model dimensions. `hidden` is the LSTM state width for encoder and
/// decoder alike; `stack` is the number of LSTM layers on each side.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ModelDims {
    pub features: usize,
    pub window: usize,
    pub horizon: usize,
    pub hidden: usize,
    pub stack: usize,
    pub fc_hidden: usize,
}

impl ModelDims {
    /// Full-scale configuration: 9 features, 3-hour window, 1-hour
    /// horizon, 30-wide states, stacking 2.
    pub fn full() -> Self {
        ModelDims { features: 9, window: 12, horizon: 4, hidden: 30, stack: 2, fc_hidden: 30 }
    }

    /// Desk-scale configuration for CI and quick experiments.
    pub fn desk() -> Self {
        ModelDims { hidden: 16, fc_hidden: 16, ..Self::full() }
    }
}

/// Which parameter blocks are shared (aggregated at the server).
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PartitionScheme {
    /// Input attention + encoder cells shared; everything on the decoder
    /// side (temporal attention, decoder cells, projection, head) is
    /// personalized.
    EncoderShared,
    /// The whole parameter vector is shared; the personalized part is
    /// empty. This is the classical-FL configuration.
    AllShared,
}

/// One contiguous parameter block in the flat vector.
#[derive(Debug, Clone)]
pub struct Block {
    pub name: String,
    pub rows: usize,
    pub cols: usize,
    /// Rank-1 blocks (biases) become vector leaves on the tape.
    pub vector: bool,
    pub offset: usize,
    /// Fan-in used for the init bound `1/sqrt(fan_in)`.
    pub fan_in: usize,
}

impl Block {
    pub fn len(&self) -> usize {
        self.rows * self.cols
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn shape(&self) -> Shape {
        if self.vector {
            Shape::vector(self.rows)
        } else {
            Shape::matrix(self.rows, self.cols)
        }
    }
}

/// The documented flat-vector layout: shared-side blocks first, then
/// personalized-side blocks.
#[derive(Debug, Clone)]
pub struct Layout {
    pub blocks: Vec<Block>,
    pub total: usize,
    /// Number of leading blocks on the encoder (shared) side.
    pub encoder_blocks: usize,
    /// Number of leading floats on the encoder (shared) side.
    pub encoder_len: usize,
}

const GATE_NAMES: [char; 4] = ['f', 'i', 'g', 'o'];

fn build_layout(dims: &ModelDims) -> Layout {
    let h = dims.hidden;
    let mut blocks = Vec::new();
    let mut offset = 0;
    let mut push = |name: String, rows: usize, cols: usize, vector: bool, fan_in: usize| {
        blocks.push(Block { name, rows, cols, vector, offset, fan_in });
        offset += rows * cols;
    };

    fn push_mlp(
        push: &mut dyn FnMut(String, usize, usize, bool, usize),
        prefix: &str,
        input: usize,
        hidden: usize,
    ) {
        push(format!("{prefix}.w1"), hidden, input, false, input);
        push(format!("{prefix}.b1"), hidden, 1, true, input);
        push(format!("{prefix}.w2"), 1, hidden, false, hidden);
        push(format!("{prefix}.b2"), 1, 1, true, hidden);
    }
    // Attention first layers are stored split into query ([h; c]) and key
    // columns. Mathematically identical to one matrix over the
    // concatenated input; the split lets the query product be computed
    // once per step instead of once per key. `fan_in` stays the combined
    // input width so initialization matches the unsplit layer.
    fn push_attn_mlp(
        push: &mut dyn FnMut(String, usize, usize, bool, usize),
        prefix: &str,
        query: usize,
        key: usize,
        hidden: usize,
    ) {
        let input = query + key;
        push(format!("{prefix}.w1q"), hidden, query, false, input);
        push(format!("{prefix}.w1k"), hidden, key, false, input);
        push(format!("{prefix}.b1"), hidden, 1, true, input);
        push(format!("{prefix}.w2"), 1, hidden, false, hidden);
        push(format!("{prefix}.b2"), 1, 1, true, hidden);
    }
    // Gate weights are stored fused over `[x; h]`: the left columns are
    // the input weights, the right columns the recurrent weights. One
    // affine per gate instead of two.
    fn push_cell(
        push: &mut dyn FnMut(String, usize, usize, bool, usize),
        prefix: &str,
        input: usize,
        hidden: usize,
    ) {
        for gate in GATE_NAMES {
            push(format!("{prefix}.w_{gate}"), hidden, input + hidden, false, input + hidden);
            push(format!("{prefix}.b_{gate}"), hidden, 1, true, input + hidden);
        }
    }

    // Shared (encoder) side.
    push_attn_mlp(&mut push, "inp_attn", 2 * h, dims.window, h);
    for l in 0..dims.stack {
        let input = if l == 0 { dims.features } else { h };
        push_cell(&mut push, &format!("enc{l}"), input, h);
    }
    drop(push);
    let encoder_blocks = blocks.len();
    let encoder_len = offset;

    let mut push = |name: String, rows: usize, cols: usize, vector: bool, fan_in: usize| {
        blocks.push(Block { name, rows, cols, vector, offset, fan_in });
        offset += rows * cols;
    };

    // Personalized (decoder) side.
    push_attn_mlp(&mut push, "tmp_attn", 2 * h, h, h);
    for l in 0..dims.stack {
        let input = if l == 0 { 1 } else { h };
        push_cell(&mut push, &format!("dec{l}"), input, h);
    }
    push(String::from("proj.w"), 1, h + 1, false, h + 1);
    push(String::from("proj.b"), 1, 1, true, h + 1);
    push_mlp(&mut push, "head", 2 * h, dims.fc_hidden);
    drop(push);

    Layout { blocks, total: offset, encoder_blocks, encoder_len }
}

/// Model dimensions, partition scheme, and the derived block layout.
#[derive(Debug, Clone)]
pub struct ModelSpec {
    pub dims: ModelDims,
    pub scheme: PartitionScheme,
    layout: Layout,
}

impl ModelSpec {
    pub fn new(dims: ModelDims, scheme: PartitionScheme) -> Self {
        let layout = build_layout(&dims);
        ModelSpec { dims, scheme, layout }
    }

    pub fn layout(&self) -> &Layout {
        &self.layout
    }

    pub fn total_len(&self) -> usize {
        self.layout.total
    }

    /// Length of the shared block φ under this spec's scheme.
    pub fn shared_len(&self) -> usize {
        match self.scheme {
            PartitionScheme::EncoderShared => self.layout.encoder_len,
            PartitionScheme::AllShared => self.layout.total,
        }
    }

    pub fn personal_len(&self) -> usize {
        self.total_len() - self.shared_len()
    }

    fn shared_block_range(&self) -> Range<usize> {
        match self.scheme {
            PartitionScheme::EncoderShared => 0..self.layout.encoder_blocks,
            PartitionScheme::AllShared => 0..self.layout.blocks.len(),
        }
    }

    fn personal_block_range(&self) -> Range<usize> {
        self.shared_block_range().end..self.layout.blocks.len()
    }

    /// Split `θ` into `(φ, ψ)`. The round trip through [`Self::merge`] is
    /// bitwise lossless.
    pub fn partition(&self, theta: &[f64]) -> Result<(Vec<f64>, Vec<f64>), ModelError> {
        if theta.len() != self.total_len() {
            return Err(ModelError::BadParamLength { expected: self.total_len(), got: theta.len() });
        }
        let (phi, psi) = theta.split_at(self.shared_len());
        Ok((phi.to_vec(), psi.to_vec()))
    }

    /// Rebuild `θ = [φ, ψ]`.
    pub fn merge(&self, phi: &[f64], psi: &[f64]) -> Result<Vec<f64>, ModelError> {
        if phi.len() != self.shared_len() {
            return Err(ModelError::BadParamLength { expected: self.shared_len(), got: phi.len() });
        }
        if psi.len() != self.personal_len() {
            return Err(ModelError::BadParamLength {
                expected: self.personal_len(),
                got: psi.len(),
            });
        }
        let mut theta = Vec::with_capacity(self.total_len());
        theta.extend_from_slice(phi);
        theta.extend_from_slice(psi);
        Ok(theta)
    }

    fn init_blocks(&self, range: Range<usize>, rng: &mut impl Rng) -> Vec<f64> {
        let mut out = Vec::new();
        for block in &self.layout.blocks[range] {
            let bound = 1.0 / libm::sqrt(block.fan_in as f64);
            for _ in 0..block.len() {
                out.push(rng.random_range(-bound..bound));
            }
        }
        out
    }

    /// Draw φ from `rng`, uniform in `[-1/sqrt(fan_in), 1/sqrt(fan_in))`
    /// per block.
    pub fn init_shared(&self, rng: &mut impl Rng) -> Vec<f64> {
        self.init_blocks(self.shared_block_range(), rng)
    }

    /// Draw ψ from `rng` (empty under [`PartitionScheme::AllShared`]).
    pub fn init_personal(&self, rng: &mut impl Rng) -> Vec<f64> {
        self.init_blocks(self.personal_block_range(), rng)
    }

    /// Push every parameter block as a differentiable leaf, returning
    /// grouped ids for the forward builders.
    pub fn push_leaves(&self, tape: &mut Tape, theta: &[f64]) -> Result<DarnnLeaves, ModelError> {
        if theta.len() != self.total_len() {
            return Err(ModelError::BadParamLength { expected: self.total_len(), got: theta.len() });
        }
        let mut ids = Vec::with_capacity(self.layout.blocks.len());
        for block in &self.layout.blocks {
            let vals = &theta[block.offset..block.offset + block.len()];
            ids.push(tape.param(block.shape(), vals)?);
        }
        Ok(DarnnLeaves::group(self.dims, ids))
    }

    /// Gather `∂loss/∂θ` into a flat vector in layout order. Must be
    /// called after `tape.backward`.
    pub fn extract_gradient(&self, tape: &Tape, leaves: &DarnnLeaves, out: &mut Vec<f64>) {
        out.clear();
        out.reserve(self.total_len());
        for id in &leaves.block_ids {
            out.extend_from_slice(tape.grad(*id).expect("gradient for parameter leaf"));
        }
    }
}

/// Tape ids for a two-layer MLP.
#[derive(Debug, Clone, Copy)]
pub struct MlpIds {
    pub w1: TensorId,
    pub b1: TensorId,
    pub w2: TensorId,
    pub b2: TensorId,
}

/// Tape ids for an attention-weight MLP with a split first layer.
#[derive(Debug, Clone, Copy)]
pub struct AttnMlpIds {
    pub w1_query: TensorId,
    pub w1_key: TensorId,
    pub b1: TensorId,
    pub w2: TensorId,
    pub b2: TensorId,
}

/// Tape ids for one LSTM cell: `[f, i, g, o] × [w over [x; h], b]`.
#[derive(Debug, Clone, Copy)]
pub struct CellIds {
    pub gates: [[TensorId; 2]; 4],
}

/// Grouped parameter leaves for one forward pass.
#[derive(Debug, Clone)]
pub struct DarnnLeaves {
    /// All block ids in layout order (gradient extraction).
    pub block_ids: Vec<TensorId>,
    pub inp_attn: AttnMlpIds,
    pub encoder: Vec<CellIds>,
    pub tmp_attn: AttnMlpIds,
    pub decoder: Vec<CellIds>,
    pub proj_w: TensorId,
    pub proj_b: TensorId,
    pub head: MlpIds,
}

impl DarnnLeaves {
    // Consumes ids in the exact order `build_layout` emits blocks.
    fn group(dims: ModelDims, ids: Vec<TensorId>) -> Self {
        let mut at = 0;
        let mut next = || {
            at += 1;
            ids[at - 1]
        };
        let mut attn = || AttnMlpIds {
            w1_query: next(),
            w1_key: next(),
            b1: next(),
            w2: next(),
            b2: next(),
        };
        let inp_attn = attn();
        let mut cell =
            || CellIds { gates: core::array::from_fn(|_| core::array::from_fn(|_| next())) };
        let encoder: Vec<CellIds> = (0..dims.stack).map(|_| cell()).collect();
        let mut attn = || AttnMlpIds {
            w1_query: next(),
            w1_key: next(),
            b1: next(),
            w2: next(),
            b2: next(),
        };
        let tmp_attn = attn();
        let mut cell =
            || CellIds { gates: core::array::from_fn(|_| core::array::from_fn(|_| next())) };
        let decoder: Vec<CellIds> = (0..dims.stack).map(|_| cell()).collect();
        let proj_w = next();
        let proj_b = next();
        let head = MlpIds { w1: next(), b1: next(), w2: next(), b2: next() };
        debug_assert_eq!(at, ids.len());
        DarnnLeaves { block_ids: ids, inp_attn, encoder, tmp_attn, decoder, proj_w, proj_b, head }
    }
}

/// A batch of windowed samples in row-major layout.
#[derive(Debug, Clone)]
pub struct Batch {
    pub size: usize,
    pub window: usize,
    pub features: usize,
    /// `[size, window, features]`
    pub x: Vec<f64>,
    /// `[size, window]`
    pub y_hist: Vec<f64>,
    /// `[size]`
    pub y_target: Vec<f64>,
}

impl Batch {
    pub fn validate(&self, dims: &ModelDims) -> Result<(), ModelError> {
        if self.window != dims.window {
            return Err(ModelError::BadInput {
                what: "window",
                expected: dims.window,
                got: self.window,
            });
        }
        if self.features != dims.features {
            return Err(ModelError::BadInput {
                what: "features",
                expected: dims.features,
                got: self.features,
            });
        }
        let want = self.size * self.window * self.features;
        if self.x.len() != want {
            return Err(ModelError::BadInput { what: "x", expected: want, got: self.x.len() });
        }
        if self.y_hist.len() != self.size * self.window {
            return Err(ModelError::BadInput {
                what: "y_hist",
                expected: self.size * self.window,
                got: self.y_hist.len(),
            });
        }
        if self.y_target.len() != self.size {
            return Err(ModelError::BadInput {
                what: "y_target",
                expected: self.size,
                got: self.y_target.len(),
            });
        }
        Ok(())
    }
}

/// Attention-weight network: two layers with tanh between them and a
/// linear scalar output, evaluated as
/// `w2 · tanh(W1q·[h; c] + W1k·key + b1) + b2`.
/// The query product is shared across keys within one step.
fn attn_query(
    tape: &mut Tape,
    h: TensorId,
    c: TensorId,
    mlp: &AttnMlpIds,
) -> Result<TensorId, TensorError> {
    let query = tape.concat(&[h, c])?;
    tape.affine(query, mlp.w1_query, Some(mlp.b1))
}

fn attn_logit(
    tape: &mut Tape,
    query_pre: TensorId,
    key: TensorId,
    mlp: &AttnMlpIds,
) -> Result<TensorId, TensorError> {
    let key_pre = tape.affine(key, mlp.w1_key, None)?;
    let pre = tape.add(query_pre, key_pre)?;
    let act = tape.tanh(pre);
    tape.affine(act, mlp.w2, Some(mlp.b2))
}

/// One LSTM cell step:
/// `f,i,o = σ(W·[x; h] + b)`, `g = tanh(W·[x; h] + b)`,
/// `c = g⊙i + c_prev⊙f`, `h = tanh(c)⊙o`.
pub fn lstm_cell_forward(
    tape: &mut Tape,
    x: TensorId,
    h_prev: TensorId,
    c_prev: TensorId,
    cell: &CellIds,
) -> Result<(TensorId, TensorId), TensorError> {
    let xh = tape.concat(&[x, h_prev])?;
    let mut pre = [None; 4];
    for (k, gate) in cell.gates.iter().enumerate() {
        pre[k] = Some(tape.affine(xh, gate[0], Some(gate[1]))?);
    }
    let f = tape.sigmoid(pre[0].expect("gate"));
    let i = tape.sigmoid(pre[1].expect("gate"));
    let g = tape.tanh(pre[2].expect("gate"));
    let o = tape.sigmoid(pre[3].expect("gate"));
    let gi = tape.hadamard(g, i)?;
    let cf = tape.hadamard(c_prev, f)?;
    let c = tape.add(gi, cf)?;
    let tc = tape.tanh(c);
    let h = tape.hadamard(tc, o)?;
    Ok((h, c))
}

/// Softmax feature weights for one encoder step. `x_feats[i]` is the full
/// series of feature `i` over the window, shape `[B, T]`; the query is the
/// top-layer encoder state.
pub fn input_attention(
    tape: &mut Tape,
    h: TensorId,
    c: TensorId,
    x_feats: &[TensorId],
    mlp: &AttnMlpIds,
) -> Result<TensorId, ModelError> {
    if x_feats.is_empty() {
        return Err(ModelError::NoFeatures);
    }
    let query_pre = attn_query(tape, h, c, mlp)?;
    let mut logits = Vec::with_capacity(x_feats.len());
    for &xi in x_feats {
        logits.push(attn_logit(tape, query_pre, xi, mlp)?);
    }
    let joined = tape.concat(&logits)?;
    Ok(tape.softmax(joined, 1)?)
}

/// Softmax weights over the `T` encoder states, the attended context
/// vector, and the projected decoder input
/// `ỹ_t = w_c·[context; y_t] + b_c`.
#[allow(clippy::too_many_arguments)]
pub fn temporal_attention_step(
    tape: &mut Tape,
    h: TensorId,
    c: TensorId,
    enc_states: &[TensorId],
    enc_stacked: TensorId,
    y_t: TensorId,
    mlp: &AttnMlpIds,
    proj_w: TensorId,
    proj_b: TensorId,
) -> Result<(TensorId, TensorId, TensorId), ModelError> {
    let query_pre = attn_query(tape, h, c, mlp)?;
    let mut logits = Vec::with_capacity(enc_states.len());
    for &he in enc_states {
        logits.push(attn_logit(tape, query_pre, he, mlp)?);
    }
    let joined = tape.concat(&logits)?;
    let beta = tape.softmax(joined, 1)?;
    let context = tape.weighted_sum(enc_stacked, beta)?;
    let folded = tape.concat(&[context, y_t])?;
    let y_tilde = tape.affine(folded, proj_w, Some(proj_b))?;
    Ok((beta, context, y_tilde))
}

/// Constants for one batch, pre-sliced per step and per feature.
struct BatchConsts {
    x_steps: Vec<TensorId>,
    x_feats: Vec<TensorId>,
    y_steps: Vec<TensorId>,
}

fn push_batch_consts(tape: &mut Tape, batch: &Batch) -> Result<BatchConsts, TensorError> {
    let (b, t, n) = (batch.size, batch.window, batch.features);
    let mut buf = Vec::new();

    let mut x_steps = Vec::with_capacity(t);
    for step in 0..t {
        buf.clear();
        for r in 0..b {
            let at = (r * t + step) * n;
            buf.extend_from_slice(&batch.x[at..at + n]);
        }
        x_steps.push(tape.constant(Shape::matrix(b, n), &buf)?);
    }
    let mut x_feats = Vec::with_capacity(n);
    for feat in 0..n {
        buf.clear();
        for r in 0..b {
            for step in 0..t {
                buf.push(batch.x[(r * t + step) * n + feat]);
            }
        }
        x_feats.push(tape.constant(Shape::matrix(b, t), &buf)?);
    }
    let mut y_steps = Vec::with_capacity(t);
    for step in 0..t {
        buf.clear();
        for r in 0..b {
            buf.push(batch.y_hist[r * t + step]);
        }
        y_steps.push(tape.constant(Shape::matrix(b, 1), &buf)?);
    }
    Ok(BatchConsts { x_steps, x_feats, y_steps })
}

/// Run the input-attention + stacked-LSTM encoder, returning the top-layer
/// hidden state at every step. Initial states are zero.
fn encoder_forward_consts(
    tape: &mut Tape,
    dims: &ModelDims,
    leaves: &DarnnLeaves,
    consts: &BatchConsts,
    batch_size: usize,
) -> Result<Vec<TensorId>, ModelError> {
    let state_shape = Shape::matrix(batch_size, dims.hidden);
    let mut h: Vec<TensorId> = (0..dims.stack).map(|_| tape.zeros(state_shape)).collect();
    let mut c: Vec<TensorId> = (0..dims.stack).map(|_| tape.zeros(state_shape)).collect();
    let top = dims.stack - 1;
    let mut states = Vec::with_capacity(dims.window);
    for t in 0..dims.window {
        let alpha = input_attention(tape, h[top], c[top], &consts.x_feats, &leaves.inp_attn)?;
        let mut input = tape.hadamard(alpha, consts.x_steps[t])?;
        for (l, cell) in leaves.encoder.iter().enumerate() {
            let (hn, cn) = lstm_cell_forward(tape, input, h[l], c[l], cell)?;
            h[l] = hn;
            c[l] = cn;
            input = hn;
        }
        states.push(h[top]);
    }
    Ok(states)
}

/// Encoder over an explicit batch; exposed for step-by-step equivalence
/// tests against manual composition of the attention and cell ops.
pub fn encoder_forward(
    tape: &mut Tape,
    spec: &ModelSpec,
    theta: &[f64],
    batch: &Batch,
) -> Result<Vec<TensorId>, ModelError> {
    batch.validate(&spec.dims)?;
    let leaves = spec.push_leaves(tape, theta)?;
    let consts = push_batch_consts(tape, batch)?;
    encoder_forward_consts(tape, &spec.dims, &leaves, &consts, batch.size)
}

/// Full forward pass: forecast tensor of shape `[B, 1]`.
pub fn darnn_forward(
    tape: &mut Tape,
    spec: &ModelSpec,
    leaves: &DarnnLeaves,
    batch: &Batch,
) -> Result<TensorId, ModelError> {
    batch.validate(&spec.dims)?;
    let dims = &spec.dims;
    let consts = push_batch_consts(tape, batch)?;
    let enc_states = encoder_forward_consts(tape, dims, leaves, &consts, batch.size)?;
    let enc_stacked = tape.stack(&enc_states)?;

    let state_shape = Shape::matrix(batch.size, dims.hidden);
    let mut h: Vec<TensorId> = (0..dims.stack).map(|_| tape.zeros(state_shape)).collect();
    let mut c: Vec<TensorId> = (0..dims.stack).map(|_| tape.zeros(state_shape)).collect();
    let top = dims.stack - 1;
    let mut context = None;
    for t in 0..dims.window {
        let (_beta, ctx, y_tilde) = temporal_attention_step(
            tape,
            h[top],
            c[top],
            &enc_states,
            enc_stacked,
            consts.y_steps[t],
            &leaves.tmp_attn,
            leaves.proj_w,
            leaves.proj_b,
        )?;
        context = Some(ctx);
        let mut input = y_tilde;
        for (l, cell) in leaves.decoder.iter().enumerate() {
            let (hn, cn) = lstm_cell_forward(tape, input, h[l], c[l], cell)?;
            h[l] = hn;
            c[l] = cn;
            input = hn;
        }
    }
    let folded = tape.concat(&[h[top], context.expect("window >= 1")])?;
    let pre = tape.affine(folded, leaves.head.w1, Some(leaves.head.b1))?;
    let act = tape.relu(pre);
    Ok(tape.affine(act, leaves.head.w2, Some(leaves.head.b2))?)
}

/// Mean squared forecast error over the batch, as a scalar tensor.
pub fn batch_loss(
    tape: &mut Tape,
    forecast: TensorId,
    batch: &Batch,
) -> Result<TensorId, ModelError> {
    let target = tape.constant(Shape::matrix(batch.size, 1), &batch.y_target)?;
    let diff = tape.sub(forecast, target)?;
    let sq = tape.hadamard(diff, diff)?;
    Ok(tape.mean(sq))
}

/// Squared forecast error for a single prediction.
pub fn squared_error(forecast: f64, actual: f64) -> f64 {
    let d = forecast - actual;
    d * d
}

/// Forecasts for a batch without keeping the graph around.
pub fn forecast_batch(
    tape: &mut Tape,
    spec: &ModelSpec,
    theta: &[f64],
    batch: &Batch,
) -> Result<Vec<f64>, ModelError> {
    tape.reset();
    let leaves = spec.push_leaves(tape, theta)?;
    let out = darnn_forward(tape, spec, &leaves, batch)?;
    let values = tape.value(out).to_vec();
    tape.reset();
    Ok(values)
}

// ── flat parameter serialization ────────────────────────────────────────

pub const CODEC_MAGIC: [u8; 4] = *b"PPFL";
pub const CODEC_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum CodecError {
    BadMagic,
    UnsupportedVersion { got: u32 },
    Truncated { expected: usize, got: usize },
    LengthMismatch { expected: usize, got: usize },
}

impl fmt::Display for CodecError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CodecError::BadMagic => write!(f, "not a parameter blob (bad magic)"),
            CodecError::UnsupportedVersion { got } => {
                write!(f, "unsupported layout version {got} (this build reads {CODEC_VERSION})")
            }
            CodecError::Truncated { expected, got } => {
                write!(f, "truncated blob: expected {expected} bytes, got {got}")
            }
            CodecError::LengthMismatch { expected, got } => {
                write!(f, "parameter count {got} does not match the dimension table ({expected})")
            }
        }
    }
}

impl core::error::Error for CodecError {}

/// Encode `θ` as a little-endian flat vector behind a short header
/// (layout version + dimension table + partition scheme).
pub fn encode_params(spec: &ModelSpec, theta: &[f64]) -> Result<Vec<u8>, ModelError> {
    if theta.len() != spec.total_len() {
        return Err(ModelError::BadParamLength { expected: spec.total_len(), got: theta.len() });
    }
    let mut out = Vec::with_capacity(48 + theta.len() * 8);
    out.extend_from_slice(&CODEC_MAGIC);
    out.extend_from_slice(&CODEC_VERSION.to_le_bytes());
    for d in [
        spec.dims.features,
        spec.dims.window,
        spec.dims.horizon,
        spec.dims.hidden,
        spec.dims.stack,
        spec.dims.fc_hidden,
    ] {
        out.extend_from_slice(&(d as u32).to_le_bytes());
    }
    let scheme = match spec.scheme {
        PartitionScheme::EncoderShared => 0u32,
        PartitionScheme::AllShared => 1u32,
    };
    out.extend_from_slice(&scheme.to_le_bytes());
    out.extend_from_slice(&(theta.len() as u64).to_le_bytes());
    for v in theta {
        out.extend_from_slice(&v.to_le_bytes());
    }
    Ok(out)
}

/// Decode a parameter blob, validating the dimension table against the
/// stored vector length.
pub fn decode_params(bytes: &[u8]) -> Result<(ModelSpec, Vec<f64>), CodecError> {
    const HEADER: usize = 4 + 4 + 6 * 4 + 4 + 8;
    if bytes.len() < HEADER {
        return Err(CodecError::Truncated { expected: HEADER, got: bytes.len() });
    }
    if bytes[..4] != CODEC_MAGIC {
        return Err(CodecError::BadMagic);
    }
    let u32_at = |at: usize| u32::from_le_bytes(bytes[at..at + 4].try_into().expect("4 bytes"));
    let version = u32_at(4);
    if version != CODEC_VERSION {
        return Err(CodecError::UnsupportedVersion { got: version });
    }
    let dims = ModelDims {
        features: u32_at(8) as usize,
        window: u32_at(12) as usize,
        horizon: u32_at(16) as usize,
        hidden: u32_at(20) as usize,
        stack: u32_at(24) as usize,
        fc_hidden: u32_at(28) as usize,
    };
    let scheme = match u32_at(32) {
        0 => PartitionScheme::EncoderShared,
        _ => PartitionScheme::AllShared,
    };
    let count = u64::from_le_bytes(bytes[36..44].try_into().expect("8 bytes")) as usize;
    let spec = ModelSpec::new(dims, scheme);
    if count != spec.total_len() {
        return Err(CodecError::LengthMismatch { expected: spec.total_len(), got: count });
    }
    let want = HEADER + count * 8;
    if bytes.len() != want {
        return Err(CodecError::Truncated { expected: want, got: bytes.len() });
    }
    let mut theta = Vec::with_capacity(count);
    for chunk in bytes[HEADER..].chunks_exact(8) {
        theta.push(f64::from_le_bytes(chunk.try_into().expect("8 bytes")));
    }
    Ok((spec, theta))
}

//! Dense-tensor numerics with reverse-mode differentiation.
//!
//! A [`Tape`] records primitive operations during the forward pass and
//! replays them in reverse to accumulate gradients. Values and gradients
//! live in two flat arenas indexed by [`TensorId`], so a training loop can
//! rebuild the graph every minibatch without allocator churn: `reset()`
//! keeps the arena capacity.
//!
//! Primitives are tensor-granular (whole affine maps, row softmax, batched
//! weighted sums) rather than scalar-granular; the batch dimension is
//! always the leading axis.

use alloc::vec;
use alloc::vec::Vec;
use core::fmt;

/// Dimension list for a tensor of rank 1..=3.
#[derive(Clone, Copy, PartialEq, Eq, Debug)]
pub struct Shape {
    dims: [usize; 3],
    rank: u8,
}

impl Shape {
    pub fn vector(n: usize) -> Self {
        Shape { dims: [n, 1, 1], rank: 1 }
    }

    pub fn matrix(rows: usize, cols: usize) -> Self {
        Shape { dims: [rows, cols, 1], rank: 2 }
    }

    pub fn cube(a: usize, b: usize, c: usize) -> Self {
        Shape { dims: [a, b, c], rank: 3 }
    }

    pub fn rank(&self) -> usize {
        self.rank as usize
    }

    pub fn dims(&self) -> &[usize] {
        &self.dims[..self.rank as usize]
    }

    pub fn numel(&self) -> usize {
        self.dims().iter().product()
    }

    /// Leading dimension: batch size for rank >= 2, length for vectors.
    pub fn rows(&self) -> usize {
        self.dims[0]
    }

    /// Trailing dimension of a matrix.
    pub fn cols(&self) -> usize {
        self.dims[1]
    }
}

impl fmt::Display for Shape {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "[")?;
        for (i, d) in self.dims().iter().enumerate() {
            if i > 0 {
                write!(f, "x")?;
            }
            write!(f, "{d}")?;
        }
        write!(f, "]")
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum TensorError {
    /// Input shapes do not conform for the requested primitive.
    ShapeMismatch {
        op: &'static str,
        lhs: Shape,
        rhs: Shape,
    },
    /// Value buffer length disagrees with the declared shape.
    BadLength { expected: usize, got: usize },
    /// `backward` requires a scalar loss.
    NonScalarLoss { shape: Shape },
    /// `backward` on a tape with no recorded operations.
    EmptyTape,
    /// Softmax axis outside the tensor rank (only the trailing axis is
    /// supported).
    UnsupportedAxis { op: &'static str, axis: usize },
}

impl fmt::Display for TensorError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            TensorError::ShapeMismatch { op, lhs, rhs } => {
                write!(f, "{op}: shapes {lhs} and {rhs} do not conform")
            }
            TensorError::BadLength { expected, got } => {
                write!(f, "value buffer length {got} does not match shape ({expected} elements)")
            }
            TensorError::NonScalarLoss { shape } => {
                write!(f, "backward requires a scalar loss, got {shape}")
            }
            TensorError::EmptyTape => write!(f, "backward on an empty tape"),
            TensorError::UnsupportedAxis { op, axis } => {
                write!(f, "{op}: axis {axis} not supported (trailing axis only)")
            }
        }
    }
}

impl core::error::Error for TensorError {}

/// Identity of a tensor within one recording session.
#[derive(Clone, Copy, PartialEq, Eq, Debug)]
pub struct TensorId(u32);

impl TensorId {
    fn idx(self) -> usize {
        self.0 as usize
    }
}

#[derive(Clone, Copy)]
struct Meta {
    off: usize,
    shape: Shape,
    requires_grad: bool,
}

#[derive(Clone, Copy)]
enum OpKind {
    Affine { bias: bool },
    Sigmoid,
    Tanh,
    Relu,
    Softmax,
    Hadamard,
    Add,
    Sub,
    Scale(f64),
    Sum,
    Concat,
    Stack,
    WeightedSum,
}

struct OpRec {
    kind: OpKind,
    args_at: u32,
    args_len: u16,
    out: TensorId,
}

/// Recording tape. One tape per execution context; distinct clients use
/// distinct tapes.
#[derive(Default)]
pub struct Tape {
    data: Vec<f64>,
    grad: Vec<f64>,
    metas: Vec<Meta>,
    ops: Vec<OpRec>,
    args: Vec<TensorId>,
    has_grads: bool,
    spent: bool,
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    /// Clear all recorded state, keeping allocations for reuse.
    pub fn reset(&mut self) {
        self.data.clear();
        self.grad.clear();
        self.metas.clear();
        self.ops.clear();
        self.args.clear();
        self.has_grads = false;
        self.spent = false;
    }

    pub fn num_tensors(&self) -> usize {
        self.metas.len()
    }

    pub fn shape(&self, id: TensorId) -> Shape {
        self.metas[id.idx()].shape
    }

    pub fn value(&self, id: TensorId) -> &[f64] {
        let m = self.metas[id.idx()];
        &self.data[m.off..m.off + m.shape.numel()]
    }

    /// Gradient of the last `backward` loss w.r.t. `id`. `None` until
    /// `backward` has run or if the tensor does not require gradients.
    pub fn grad(&self, id: TensorId) -> Option<&[f64]> {
        let m = self.metas[id.idx()];
        if !self.has_grads || !m.requires_grad {
            return None;
        }
        Some(&self.grad[m.off..m.off + m.shape.numel()])
    }

    /// Differentiable leaf (model parameters).
    pub fn param(&mut self, shape: Shape, values: &[f64]) -> Result<TensorId, TensorError> {
        self.leaf(shape, values, true)
    }

    /// Non-differentiable leaf (inputs, targets, initial states).
    pub fn constant(&mut self, shape: Shape, values: &[f64]) -> Result<TensorId, TensorError> {
        self.leaf(shape, values, false)
    }

    pub fn zeros(&mut self, shape: Shape) -> TensorId {
        assert!(!self.spent, "tape consumed by backward(); call reset()");
        let off = self.data.len();
        self.data.resize(off + shape.numel(), 0.0);
        self.push_meta(off, shape, false)
    }

    fn leaf(&mut self, shape: Shape, values: &[f64], requires_grad: bool) -> Result<TensorId, TensorError> {
        assert!(!self.spent, "tape consumed by backward(); call reset()");
        if values.len() != shape.numel() {
            return Err(TensorError::BadLength { expected: shape.numel(), got: values.len() });
        }
        let off = self.data.len();
        self.data.extend_from_slice(values);
        Ok(self.push_meta(off, shape, requires_grad))
    }

    fn push_meta(&mut self, off: usize, shape: Shape, requires_grad: bool) -> TensorId {
        let id = TensorId(self.metas.len() as u32);
        self.metas.push(Meta { off, shape, requires_grad });
        id
    }

    fn requires_grad_any(&self, ids: &[TensorId]) -> bool {
        ids.iter().any(|id| self.metas[id.idx()].requires_grad)
    }

    /// Allocate the output region and record the op. Output values are
    /// written by the caller through the returned mutable slice, which is
    /// disjoint from all existing tensors (append-only arena).
    fn record(&mut self, kind: OpKind, inputs: &[TensorId], out_shape: Shape) -> TensorId {
        assert!(!self.spent, "tape consumed by backward(); call reset()");
        let requires_grad = self.requires_grad_any(inputs);
        let off = self.data.len();
        self.data.resize(off + out_shape.numel(), 0.0);
        let out = self.push_meta(off, out_shape, requires_grad);
        let args_at = self.args.len() as u32;
        self.args.extend_from_slice(inputs);
        self.ops.push(OpRec { kind, args_at, args_len: inputs.len() as u16, out });
        out
    }

    fn out_and_head(&mut self, out: TensorId) -> (&mut [f64], &[f64]) {
        let m = self.metas[out.idx()];
        let (head, tail) = self.data.split_at_mut(m.off);
        (&mut tail[..m.shape.numel()], head)
    }

    fn slice_of<'a>(head: &'a [f64], m: Meta) -> &'a [f64] {
        &head[m.off..m.off + m.shape.numel()]
    }

    // ── primitives ─────────────────────────────────────────────────────

    /// `x · Wᵀ (+ b)` for `x` of shape `[B, in]`, `W` of shape `[out, in]`
    /// and optional bias `[out]`.
    pub fn affine(
        &mut self,
        x: TensorId,
        w: TensorId,
        b: Option<TensorId>,
    ) -> Result<TensorId, TensorError> {
        let (xs, ws) = (self.shape(x), self.shape(w));
        if xs.rank() != 2 || ws.rank() != 2 || xs.cols() != ws.cols() {
            return Err(TensorError::ShapeMismatch { op: "affine", lhs: xs, rhs: ws });
        }
        let (rows, inner, out_w) = (xs.rows(), xs.cols(), ws.rows());
        if let Some(bid) = b {
            let bs = self.shape(bid);
            if bs.rank() != 1 || bs.rows() != out_w {
                return Err(TensorError::ShapeMismatch { op: "affine bias", lhs: ws, rhs: bs });
            }
        }
        let mut inputs = vec![x, w];
        if let Some(bid) = b {
            inputs.push(bid);
        }
        let out = self.record(
            OpKind::Affine { bias: b.is_some() },
            &inputs,
            Shape::matrix(rows, out_w),
        );
        let (mx, mw) = (self.metas[x.idx()], self.metas[w.idx()]);
        let mb = b.map(|bid| self.metas[bid.idx()]);
        let (o, head) = self.out_and_head(out);
        let xv = Self::slice_of(head, mx);
        let wv = Self::slice_of(head, mw);
        let bv = mb.map(|m| Self::slice_of(head, m));
        let _ = (rows, out_w);
        match bv {
            Some(bb) => {
                for (xrow, orow) in xv.chunks_exact(inner).zip(o.chunks_exact_mut(out_w)) {
                    for ((oj, wrow), bj) in
                        orow.iter_mut().zip(wv.chunks_exact(inner)).zip(bb)
                    {
                        *oj = bj + dot(xrow, wrow);
                    }
                }
            }
            None => {
                for (xrow, orow) in xv.chunks_exact(inner).zip(o.chunks_exact_mut(out_w)) {
                    for (oj, wrow) in orow.iter_mut().zip(wv.chunks_exact(inner)) {
                        *oj = dot(xrow, wrow);
                    }
                }
            }
        }
        Ok(out)
    }

    pub fn sigmoid(&mut self, x: TensorId) -> TensorId {
        let out = self.record(OpKind::Sigmoid, &[x], self.shape(x));
        let mx = self.metas[x.idx()];
        let (o, head) = self.out_and_head(out);
        for (oi, xi) in o.iter_mut().zip(Self::slice_of(head, mx)) {
            *oi = sigmoid(*xi);
        }
        out
    }

    pub fn tanh(&mut self, x: TensorId) -> TensorId {
        let out = self.record(OpKind::Tanh, &[x], self.shape(x));
        let mx = self.metas[x.idx()];
        let (o, head) = self.out_and_head(out);
        for (oi, xi) in o.iter_mut().zip(Self::slice_of(head, mx)) {
            *oi = tanh(*xi);
        }
        out
    }

    pub fn relu(&mut self, x: TensorId) -> TensorId {
        let out = self.record(OpKind::Relu, &[x], self.shape(x));
        let mx = self.metas[x.idx()];
        let (o, head) = self.out_and_head(out);
        for (oi, xi) in o.iter_mut().zip(Self::slice_of(head, mx)) {
            *oi = if *xi > 0.0 { *xi } else { 0.0 };
        }
        out
    }

    /// Row softmax with max-subtraction. `axis` must be the trailing axis
    /// (0 for vectors, 1 for matrices).
    pub fn softmax(&mut self, x: TensorId, axis: usize) -> Result<TensorId, TensorError> {
        let xs = self.shape(x);
        let expected_axis = xs.rank() - 1;
        if axis != expected_axis || xs.rank() > 2 {
            return Err(TensorError::UnsupportedAxis { op: "softmax", axis });
        }
        let width = *xs.dims().last().expect("nonempty shape");
        if width == 0 {
            return Err(TensorError::ShapeMismatch { op: "softmax", lhs: xs, rhs: xs });
        }
        let out = self.record(OpKind::Softmax, &[x], xs);
        let mx = self.metas[x.idx()];
        let (o, head) = self.out_and_head(out);
        let xv = Self::slice_of(head, mx);
        for (orow, xrow) in o.chunks_exact_mut(width).zip(xv.chunks_exact(width)) {
            let max = xrow.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut total = 0.0;
            for (oi, xi) in orow.iter_mut().zip(xrow) {
                *oi = libm::exp(xi - max);
                total += *oi;
            }
            let inv = 1.0 / total;
            for oi in orow.iter_mut() {
                *oi *= inv;
            }
        }
        Ok(out)
    }

    pub fn hadamard(&mut self, a: TensorId, b: TensorId) -> Result<TensorId, TensorError> {
        self.elementwise(OpKind::Hadamard, "hadamard", a, b)
    }

    pub fn add(&mut self, a: TensorId, b: TensorId) -> Result<TensorId, TensorError> {
        self.elementwise(OpKind::Add, "add", a, b)
    }

    pub fn sub(&mut self, a: TensorId, b: TensorId) -> Result<TensorId, TensorError> {
        self.elementwise(OpKind::Sub, "sub", a, b)
    }

    fn elementwise(
        &mut self,
        kind: OpKind,
        name: &'static str,
        a: TensorId,
        b: TensorId,
    ) -> Result<TensorId, TensorError> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa != sb {
            return Err(TensorError::ShapeMismatch { op: name, lhs: sa, rhs: sb });
        }
        let out = self.record(kind, &[a, b], sa);
        let (ma, mb) = (self.metas[a.idx()], self.metas[b.idx()]);
        let (o, head) = self.out_and_head(out);
        let av = Self::slice_of(head, ma);
        let bv = Self::slice_of(head, mb);
        match kind {
            OpKind::Hadamard => {
                for ((oi, ai), bi) in o.iter_mut().zip(av).zip(bv) {
                    *oi = ai * bi;
                }
            }
            OpKind::Add => {
                for ((oi, ai), bi) in o.iter_mut().zip(av).zip(bv) {
                    *oi = ai + bi;
                }
            }
            OpKind::Sub => {
                for ((oi, ai), bi) in o.iter_mut().zip(av).zip(bv) {
                    *oi = ai - bi;
                }
            }
            _ => unreachable!(),
        }
        Ok(out)
    }

    pub fn scale(&mut self, x: TensorId, factor: f64) -> TensorId {
        let out = self.record(OpKind::Scale(factor), &[x], self.shape(x));
        let mx = self.metas[x.idx()];
        let (o, head) = self.out_and_head(out);
        for (oi, xi) in o.iter_mut().zip(Self::slice_of(head, mx)) {
            *oi = factor * xi;
        }
        out
    }

    /// Sum of all elements, as a `[1]` tensor.
    pub fn sum(&mut self, x: TensorId) -> TensorId {
        let out = self.record(OpKind::Sum, &[x], Shape::vector(1));
        let mx = self.metas[x.idx()];
        let (o, head) = self.out_and_head(out);
        o[0] = vsum(Self::slice_of(head, mx));
        out
    }

    /// Mean of all elements, as a `[1]` tensor.
    pub fn mean(&mut self, x: TensorId) -> TensorId {
        let n = self.shape(x).numel();
        let s = self.sum(x);
        self.scale(s, 1.0 / n as f64)
    }

    /// Concatenate along the trailing axis: vectors end to end, or
    /// matrices with equal row counts side by side.
    pub fn concat(&mut self, parts: &[TensorId]) -> Result<TensorId, TensorError> {
        assert!(!parts.is_empty(), "concat of zero tensors");
        let first = self.shape(parts[0]);
        let rank = first.rank();
        let rows = if rank == 2 { first.rows() } else { 1 };
        let mut width = 0;
        for &p in parts {
            let s = self.shape(p);
            let ok = s.rank() == rank && (rank == 1 || s.rows() == rows);
            if !ok {
                return Err(TensorError::ShapeMismatch { op: "concat", lhs: first, rhs: s });
            }
            width += if rank == 2 { s.cols() } else { s.rows() };
        }
        let out_shape = if rank == 2 { Shape::matrix(rows, width) } else { Shape::vector(width) };
        let out = self.record(OpKind::Concat, parts, out_shape);
        let metas: Vec<Meta> = parts.iter().map(|p| self.metas[p.idx()]).collect();
        let (o, head) = self.out_and_head(out);
        for r in 0..rows {
            let orow = &mut o[r * width..(r + 1) * width];
            let mut at = 0;
            for m in &metas {
                let w = m.shape.numel() / rows;
                let pv = Self::slice_of(head, *m);
                orow[at..at + w].copy_from_slice(&pv[r * w..(r + 1) * w]);
                at += w;
            }
        }
        Ok(out)
    }

    /// Stack `k` matrices of shape `[B, H]` into `[B, k, H]`.
    pub fn stack(&mut self, parts: &[TensorId]) -> Result<TensorId, TensorError> {
        assert!(!parts.is_empty(), "stack of zero tensors");
        let first = self.shape(parts[0]);
        for &p in parts {
            let s = self.shape(p);
            if s.rank() != 2 || s != first {
                return Err(TensorError::ShapeMismatch { op: "stack", lhs: first, rhs: s });
            }
        }
        let (b, h, k) = (first.rows(), first.cols(), parts.len());
        let out = self.record(OpKind::Stack, parts, Shape::cube(b, k, h));
        let metas: Vec<Meta> = parts.iter().map(|p| self.metas[p.idx()]).collect();
        let (o, head) = self.out_and_head(out);
        for (t, m) in metas.iter().enumerate() {
            let pv = Self::slice_of(head, *m);
            for r in 0..b {
                let dst = (r * k + t) * h;
                o[dst..dst + h].copy_from_slice(&pv[r * h..(r + 1) * h]);
            }
        }
        Ok(out)
    }

    /// Batched weighted sum over the middle axis:
    /// `(values [B, T, H], weights [B, T]) -> [B, H]`.
    pub fn weighted_sum(&mut self, values: TensorId, weights: TensorId) -> Result<TensorId, TensorError> {
        let (vs, ws) = (self.shape(values), self.shape(weights));
        let conforms = vs.rank() == 3
            && ws.rank() == 2
            && vs.dims()[0] == ws.dims()[0]
            && vs.dims()[1] == ws.dims()[1];
        if !conforms {
            return Err(TensorError::ShapeMismatch { op: "weighted_sum", lhs: vs, rhs: ws });
        }
        let (b, t, h) = (vs.dims()[0], vs.dims()[1], vs.dims()[2]);
        let out = self.record(OpKind::WeightedSum, &[values, weights], Shape::matrix(b, h));
        let (mv, mw) = (self.metas[values.idx()], self.metas[weights.idx()]);
        let (o, head) = self.out_and_head(out);
        let vv = Self::slice_of(head, mv);
        let wv = Self::slice_of(head, mw);
        for r in 0..b {
            let orow = &mut o[r * h..(r + 1) * h];
            for ti in 0..t {
                axpy(wv[r * t + ti], &vv[(r * t + ti) * h..(r * t + ti + 1) * h], orow);
            }
        }
        Ok(out)
    }

    // ── reverse pass ───────────────────────────────────────────────────

    /// Propagate gradients from a scalar loss to every reachable leaf.
    /// The tape is consumed: record no further ops until `reset()`.
    pub fn backward(&mut self, loss: TensorId) -> Result<(), TensorError> {
        let ls = self.shape(loss);
        if ls.numel() != 1 {
            return Err(TensorError::NonScalarLoss { shape: ls });
        }
        if self.ops.is_empty() {
            return Err(TensorError::EmptyTape);
        }
        self.grad.clear();
        self.grad.resize(self.data.len(), 0.0);
        self.grad[self.metas[loss.idx()].off] = 1.0;

        for oi in (0..self.ops.len()).rev() {
            let OpRec { kind, args_at, args_len, out } = self.ops[oi];
            let args_at = args_at as usize;
            let inputs = &self.args[args_at..args_at + args_len as usize];
            let mo = self.metas[out.idx()];
            // Inputs always precede the output in the append-only arena,
            // so the upstream gradient can be read while input gradients
            // are accumulated.
            let (gin, gout) = self.grad.split_at_mut(mo.off);
            let g = &gout[..mo.shape.numel()];
            step_backward(kind, inputs, mo, &self.metas, &self.data, gin, g);
        }
        self.has_grads = true;
        self.spent = true;
        Ok(())
    }
}

#[allow(clippy::too_many_arguments)]
fn step_backward(
    kind: OpKind,
    inputs: &[TensorId],
    mo: Meta,
    metas: &[Meta],
    data: &[f64],
    grad: &mut [f64],
    g: &[f64],
) {
    let val = |m: Meta| &data[m.off..m.off + m.shape.numel()];
    let needs = |m: Meta| m.requires_grad;
    match kind {
        OpKind::Affine { bias } => {
            let (mx, mw) = (metas[inputs[0].idx()], metas[inputs[1].idx()]);
            let inner = mx.shape.cols();
            let out_w = mw.shape.rows();
            if needs(mx) {
                let wv = val(mw);
                let dx = &mut grad[mx.off..mx.off + mx.shape.numel()];
                for (grow, dxrow) in g.chunks_exact(out_w).zip(dx.chunks_exact_mut(inner)) {
                    for (gj, wrow) in grow.iter().zip(wv.chunks_exact(inner)) {
                        axpy(*gj, wrow, dxrow);
                    }
                }
            }
            if needs(mw) {
                let xv = val(mx);
                let dw = &mut grad[mw.off..mw.off + mw.shape.numel()];
                for (grow, xrow) in g.chunks_exact(out_w).zip(xv.chunks_exact(inner)) {
                    for (gj, dwrow) in grow.iter().zip(dw.chunks_exact_mut(inner)) {
                        axpy(*gj, xrow, dwrow);
                    }
                }
            }
            if bias {
                let mb = metas[inputs[2].idx()];
                if needs(mb) {
                    let db = &mut grad[mb.off..mb.off + out_w];
                    for grow in g.chunks_exact(out_w) {
                        for (dbj, gj) in db.iter_mut().zip(grow) {
                            *dbj += gj;
                        }
                    }
                }
            }
        }
        OpKind::Sigmoid => {
            let mx = metas[inputs[0].idx()];
            if needs(mx) {
                let y = &data[mo.off..mo.off + mo.shape.numel()];
                let dx = &mut grad[mx.off..mx.off + mx.shape.numel()];
                for ((dxi, gi), yi) in dx.iter_mut().zip(g).zip(y) {
                    *dxi += gi * yi * (1.0 - yi);
                }
            }
        }
        OpKind::Tanh => {
            let mx = metas[inputs[0].idx()];
            if needs(mx) {
                let y = &data[mo.off..mo.off + mo.shape.numel()];
                let dx = &mut grad[mx.off..mx.off + mx.shape.numel()];
                for ((dxi, gi), yi) in dx.iter_mut().zip(g).zip(y) {
                    *dxi += gi * (1.0 - yi * yi);
                }
            }
        }
        OpKind::Relu => {
            let mx = metas[inputs[0].idx()];
            if needs(mx) {
                let y = &data[mo.off..mo.off + mo.shape.numel()];
                let dx = &mut grad[mx.off..mx.off + mx.shape.numel()];
                for ((dxi, gi), yi) in dx.iter_mut().zip(g).zip(y) {
                    if *yi > 0.0 {
                        *dxi += gi;
                    }
                }
            }
        }
        OpKind::Softmax => {
            let mx = metas[inputs[0].idx()];
            if needs(mx) {
                let width = *mo.shape.dims().last().expect("nonempty");
                let y = &data[mo.off..mo.off + mo.shape.numel()];
                let dx = &mut grad[mx.off..mx.off + mx.shape.numel()];
                for ((dxrow, grow), yrow) in dx
                    .chunks_exact_mut(width)
                    .zip(g.chunks_exact(width))
                    .zip(y.chunks_exact(width))
                {
                    let inner = dot(grow, yrow);
                    for ((dxi, gi), yi) in dxrow.iter_mut().zip(grow).zip(yrow) {
                        *dxi += yi * (gi - inner);
                    }
                }
            }
        }
        OpKind::Hadamard => {
            let (ma, mb) = (metas[inputs[0].idx()], metas[inputs[1].idx()]);
            if needs(ma) {
                let bv = val(mb);
                let da = &mut grad[ma.off..ma.off + ma.shape.numel()];
                for ((dai, gi), bi) in da.iter_mut().zip(g).zip(bv) {
                    *dai += gi * bi;
                }
            }
            if needs(mb) {
                let av = val(ma);
                let db = &mut grad[mb.off..mb.off + mb.shape.numel()];
                for ((dbi, gi), ai) in db.iter_mut().zip(g).zip(av) {
                    *dbi += gi * ai;
                }
            }
        }
        OpKind::Add | OpKind::Sub => {
            let (ma, mb) = (metas[inputs[0].idx()], metas[inputs[1].idx()]);
            if needs(ma) {
                let da = &mut grad[ma.off..ma.off + ma.shape.numel()];
                for (dai, gi) in da.iter_mut().zip(g) {
                    *dai += gi;
                }
            }
            if needs(mb) {
                let sign = if matches!(kind, OpKind::Sub) { -1.0 } else { 1.0 };
                let db = &mut grad[mb.off..mb.off + mb.shape.numel()];
                for (dbi, gi) in db.iter_mut().zip(g) {
                    *dbi += sign * gi;
                }
            }
        }
        OpKind::Scale(factor) => {
            let mx = metas[inputs[0].idx()];
            if needs(mx) {
                let dx = &mut grad[mx.off..mx.off + mx.shape.numel()];
                axpy(factor, g, dx);
            }
        }
        OpKind::Sum => {
            let mx = metas[inputs[0].idx()];
            if needs(mx) {
                let g0 = g[0];
                let dx = &mut grad[mx.off..mx.off + mx.shape.numel()];
                for dxi in dx.iter_mut() {
                    *dxi += g0;
                }
            }
        }
        OpKind::Concat => {
            let rank = mo.shape.rank();
            let rows = if rank == 2 { mo.shape.rows() } else { 1 };
            let width = mo.shape.numel() / rows;
            let mut at = 0;
            for inp in inputs {
                let m = metas[inp.idx()];
                let w = m.shape.numel() / rows;
                if needs(m) {
                    let dp = &mut grad[m.off..m.off + m.shape.numel()];
                    for r in 0..rows {
                        let grow = &g[r * width + at..r * width + at + w];
                        for (di, gi) in dp[r * w..(r + 1) * w].iter_mut().zip(grow) {
                            *di += gi;
                        }
                    }
                }
                at += w;
            }
        }
        OpKind::Stack => {
            let (b, k, h) = (mo.shape.dims()[0], mo.shape.dims()[1], mo.shape.dims()[2]);
            for (t, inp) in inputs.iter().enumerate() {
                let m = metas[inp.idx()];
                if needs(m) {
                    let dp = &mut grad[m.off..m.off + m.shape.numel()];
                    for r in 0..b {
                        let src = (r * k + t) * h;
                        for (di, gi) in dp[r * h..(r + 1) * h].iter_mut().zip(&g[src..src + h]) {
                            *di += gi;
                        }
                    }
                }
            }
        }
        OpKind::WeightedSum => {
            let (mv, mw) = (metas[inputs[0].idx()], metas[inputs[1].idx()]);
            let (b, t, h) = (mv.shape.dims()[0], mv.shape.dims()[1], mv.shape.dims()[2]);
            if needs(mv) {
                let wv = val(mw);
                let dv = &mut grad[mv.off..mv.off + mv.shape.numel()];
                for r in 0..b {
                    let grow = &g[r * h..(r + 1) * h];
                    for ti in 0..t {
                        axpy(wv[r * t + ti], grow, &mut dv[(r * t + ti) * h..(r * t + ti + 1) * h]);
                    }
                }
            }
            if needs(mw) {
                let vv = val(mv);
                let dw = &mut grad[mw.off..mw.off + mw.shape.numel()];
                for r in 0..b {
                    let grow = &g[r * h..(r + 1) * h];
                    for ti in 0..t {
                        dw[r * t + ti] += dot(&vv[(r * t + ti) * h..(r * t + ti + 1) * h], grow);
                    }
                }
            }
        }
    }
}

// ── kernels ─────────────────────────────────────────────────────────────

/// Four-lane dot product. The fixed lane structure keeps summation order
/// deterministic while letting the compiler vectorize.
#[inline]
pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    let mut lanes = [0.0f64; 4];
    let ca = a.chunks_exact(4);
    let cb = b.chunks_exact(4);
    let (ra, rb) = (ca.remainder(), cb.remainder());
    for (xa, xb) in ca.zip(cb) {
        lanes[0] += xa[0] * xb[0];
        lanes[1] += xa[1] * xb[1];
        lanes[2] += xa[2] * xb[2];
        lanes[3] += xa[3] * xb[3];
    }
    let mut acc = (lanes[0] + lanes[2]) + (lanes[1] + lanes[3]);
    for (xa, xb) in ra.iter().zip(rb) {
        acc += xa * xb;
    }
    acc
}

#[inline]
pub(crate) fn axpy(alpha: f64, x: &[f64], y: &mut [f64]) {
    debug_assert_eq!(x.len(), y.len());
    for (yi, xi) in y.iter_mut().zip(x) {
        *yi += alpha * xi;
    }
}

/// Four-lane total, same determinism contract as [`dot`].
#[inline]
pub(crate) fn vsum(a: &[f64]) -> f64 {
    let mut lanes = [0.0f64; 4];
    let ch = a.chunks_exact(4);
    let rem = ch.remainder();
    for xa in ch {
        lanes[0] += xa[0];
        lanes[1] += xa[1];
        lanes[2] += xa[2];
        lanes[3] += xa[3];
    }
    let mut acc = (lanes[0] + lanes[2]) + (lanes[1] + lanes[3]);
    for xa in rem {
        acc += xa;
    }
    acc
}

#[inline]
pub(crate) fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + libm::exp(-x))
    } else {
        let e = libm::exp(x);
        e / (1.0 + e)
    }
}

// tanh through the exp identity; exp costs about half of a library tanh
// and the result stays within ~1 ulp. Exact at 0, saturates cleanly.
#[inline]
pub(crate) fn tanh(x: f64) -> f64 {
    if x >= 0.0 {
        if x > 20.0 {
            return 1.0;
        }
        let e = libm::exp(-2.0 * x);
        (1.0 - e) / (1.0 + e)
    } else {
        if x < -20.0 {
            return -1.0;
        }
        let e = libm::exp(2.0 * x);
        (e - 1.0) / (e + 1.0)
    }
}

/// Central-difference gradient estimate, the test oracle for every
/// analytic gradient in this crate: `(f(x+δeᵢ) − f(x−δeᵢ)) / 2δ`.
pub fn finite_difference_gradient<F>(mut f: F, x: &[f64], step: f64) -> Vec<f64>
where
    F: FnMut(&[f64]) -> f64,
{
    assert!(step > 0.0, "finite difference step must be positive");
    let mut probe = x.to_vec();
    let mut out = Vec::with_capacity(x.len());
    for i in 0..x.len() {
        let x0 = probe[i];
        probe[i] = x0 + step;
        let up = f(&probe);
        probe[i] = x0 - step;
        let down = f(&probe);
        probe[i] = x0;
        out.push((up - down) / (2.0 * step));
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    fn rel_err(a: f64, b: f64) -> f64 {
        libm::fabs(a - b) / libm::fabs(a).max(libm::fabs(b)).max(1e-8)
    }

    #[test]
    fn sigmoid_at_zero_is_half() {
        let mut t = Tape::new();
        let x = t.constant(Shape::vector(1), &[0.0]).unwrap();
        let y = t.sigmoid(x);
        assert_eq!(t.value(y), &[0.5]);
    }

    #[test]
    fn tanh_at_zero_is_zero() {
        let mut t = Tape::new();
        let x = t.constant(Shape::vector(1), &[0.0]).unwrap();
        let y = t.tanh(x);
        assert_eq!(t.value(y), &[0.0]);
    }

    #[test]
    fn softmax_of_constant_vector_is_uniform() {
        for c in [-3.0, 0.0, 1e6] {
            let mut t = Tape::new();
            let x = t.constant(Shape::vector(3), &[c, c, c]).unwrap();
            let y = t.softmax(x, 0).unwrap();
            for v in t.value(y) {
                assert!((v - 1.0 / 3.0).abs() < 1e-15);
            }
        }
    }

    #[test]
    fn softmax_rows_sum_to_one_and_stay_positive() {
        let mut rng = crate::rng::substream(11, crate::rng::StreamDomain::Minibatch, 0, 0);
        let mut t = Tape::new();
        let vals: Vec<f64> = (0..40).map(|_| rng.random_range(-50.0..50.0)).collect();
        let x = t.constant(Shape::matrix(8, 5), &vals).unwrap();
        let y = t.softmax(x, 1).unwrap();
        for row in t.value(y).chunks_exact(5) {
            let s: f64 = row.iter().sum();
            assert!((s - 1.0).abs() < 1e-12);
            assert!(row.iter().all(|v| *v > 0.0));
        }
    }

    #[test]
    fn square_gradient() {
        let mut t = Tape::new();
        let x = t.param(Shape::vector(1), &[3.0]).unwrap();
        let y = t.hadamard(x, x).unwrap();
        let loss = t.sum(y);
        t.backward(loss).unwrap();
        assert_eq!(t.grad(x).unwrap(), &[6.0]);
    }

    #[test]
    fn sigmoid_sum_gradient_at_zero() {
        let mut t = Tape::new();
        let x = t.param(Shape::vector(4), &[0.0; 4]).unwrap();
        let s = t.sigmoid(x);
        let loss = t.sum(s);
        t.backward(loss).unwrap();
        for g in t.grad(x).unwrap() {
            assert!((g - 0.25).abs() < 1e-15);
        }
    }

    #[test]
    fn linear_chain_gradient_is_transposed_weight_product() {
        // y = sum(W3 (W2 (W1 x))): dy/dx = (W3 W2 W1)^T 1, exactly.
        let w1 = [0.5, -1.0, 2.0, 0.25, 1.5, -0.75]; // [2x3]
        let w2 = [1.0, -2.0, 0.5, 3.0]; // [2x2]
        let w3 = [0.125, -4.0]; // [1x2]
        let x0 = [0.3, -0.7, 1.1];

        let mut t = Tape::new();
        let x = t.param(Shape::matrix(1, 3), &x0).unwrap();
        let a = t.constant(Shape::matrix(2, 3), &w1).unwrap();
        let b = t.constant(Shape::matrix(2, 2), &w2).unwrap();
        let c = t.constant(Shape::matrix(1, 2), &w3).unwrap();
        let h1 = t.affine(x, a, None).unwrap();
        let h2 = t.affine(h1, b, None).unwrap();
        let h3 = t.affine(h2, c, None).unwrap();
        let loss = t.sum(h3);
        t.backward(loss).unwrap();

        // Explicit product W3 W2 W1 → [1x3].
        let mut w32 = [0.0; 2];
        for j in 0..2 {
            w32[j] = w3[0] * w2[j] + w3[1] * w2[2 + j];
        }
        let mut expect = [0.0; 3];
        for j in 0..3 {
            expect[j] = w32[0] * w1[j] + w32[1] * w1[3 + j];
        }
        let grad = t.grad(x).unwrap();
        for (gi, ei) in grad.iter().zip(&expect) {
            assert!((gi - ei).abs() < 1e-12, "{gi} vs {ei}");
        }
    }

    #[test]
    fn random_composition_matches_finite_differences() {
        let mut rng = crate::rng::substream(5, crate::rng::StreamDomain::Minibatch, 0, 0);
        for _ in 0..5 {
            let w1: Vec<f64> = (0..12).map(|_| rng.random_range(-2.0..2.0)).collect();
            let b1: Vec<f64> = (0..4).map(|_| rng.random_range(-2.0..2.0)).collect();
            let w2: Vec<f64> = (0..8).map(|_| rng.random_range(-2.0..2.0)).collect();
            let x0: Vec<f64> = (0..6).map(|_| rng.random_range(-2.0..2.0)).collect();

            let eval = |theta: &[f64]| -> (f64, Vec<f64>, bool) {
                let mut t = Tape::new();
                let x = t.param(Shape::matrix(2, 3), theta).unwrap();
                let a = t.constant(Shape::matrix(4, 3), &w1).unwrap();
                let bb = t.constant(Shape::vector(4), &b1).unwrap();
                let c = t.constant(Shape::matrix(2, 4), &w2).unwrap();
                let h1 = t.affine(x, a, Some(bb)).unwrap();
                let h2 = t.tanh(h1);
                let h3 = t.affine(h2, c, None).unwrap();
                let h4 = t.sigmoid(h3);
                let sm = t.softmax(h4, 1).unwrap();
                let prod = t.hadamard(sm, h4).unwrap();
                let loss = t.sum(prod);
                let lv = t.value(loss)[0];
                t.backward(loss).unwrap();
                (lv, t.grad(x).unwrap().to_vec(), true)
            };

            let (_, analytic, _) = eval(&x0);
            let numeric = finite_difference_gradient(|p| eval(p).0, &x0, 1e-5);
            for (a, n) in analytic.iter().zip(&numeric) {
                assert!(rel_err(*a, *n) < 1e-4, "analytic {a} vs numeric {n}");
            }
        }
    }

    #[test]
    fn every_primitive_matches_finite_differences() {
        let mut rng = crate::rng::substream(17, crate::rng::StreamDomain::Minibatch, 0, 0);
        // 100 random input draws spread across the primitive set.
        for trial in 0..100 {
            let vals: Vec<f64> = (0..12).map(|_| rng.random_range(-2.0..2.0)).collect();
            let aux: Vec<f64> = (0..24).map(|_| rng.random_range(-2.0..2.0)).collect();
            let w: Vec<f64> = (0..12).map(|_| rng.random_range(-2.0..2.0)).collect();
            let b: Vec<f64> = (0..3).map(|_| rng.random_range(-2.0..2.0)).collect();
            let kind = trial % 10;

            let eval = |p: &[f64]| -> (f64, Vec<f64>) {
                let mut t = Tape::new();
                let x = t.param(Shape::matrix(3, 4), p).unwrap();
                let out = match kind {
                    0 => {
                        let wm = t.constant(Shape::matrix(3, 4), &w).unwrap();
                        let bv = t.constant(Shape::vector(3), &b).unwrap();
                        t.affine(x, wm, Some(bv)).unwrap()
                    }
                    1 => t.sigmoid(x),
                    2 => t.tanh(x),
                    3 => t.relu(x),
                    4 => t.softmax(x, 1).unwrap(),
                    5 => {
                        let y = t.constant(Shape::matrix(3, 4), &aux[..12]).unwrap();
                        t.hadamard(x, y).unwrap()
                    }
                    6 => {
                        let y = t.constant(Shape::matrix(3, 4), &aux[..12]).unwrap();
                        t.add(x, y).unwrap()
                    }
                    7 => t.scale(x, -1.75),
                    8 => {
                        let y = t.constant(Shape::matrix(3, 4), &aux[..12]).unwrap();
                        let c = t.concat(&[x, y]).unwrap();
                        t.tanh(c)
                    }
                    _ => {
                        let s = t.stack(&[x, x]).unwrap();
                        let wts: Vec<f64> = aux[..6].to_vec();
                        let wt = t.constant(Shape::matrix(3, 2), &wts).unwrap();
                        t.weighted_sum(s, wt).unwrap()
                    }
                };
                // Weight the output so gradients are not uniform.
                let mask = t.constant(t.shape(out), &aux[..t.shape(out).numel()]).unwrap();
                let prod = t.hadamard(out, mask).unwrap();
                let loss = t.sum(prod);
                let lv = t.value(loss)[0];
                t.backward(loss).unwrap();
                (lv, t.grad(x).unwrap().to_vec())
            };

            let (_, analytic) = eval(&vals);
            let numeric = finite_difference_gradient(|p| eval(p).0, &vals, 1e-5);
            for (a, n) in analytic.iter().zip(&numeric) {
                assert!(rel_err(*a, *n) < 1e-4, "kind {kind}: analytic {a} vs numeric {n}");
            }
        }
    }

    #[test]
    fn finite_difference_on_square_and_constant() {
        let g = finite_difference_gradient(|x| x[0] * x[0], &[3.0], 1e-5);
        assert!((g[0] - 6.0).abs() < 1e-6);
        let g = finite_difference_gradient(|_| 42.0, &[1.0, 2.0, 3.0], 1e-5);
        assert_eq!(g, alloc::vec![0.0, 0.0, 0.0]);
    }

    #[test]
    fn shape_mismatch_names_offending_shapes() {
        let mut t = Tape::new();
        let a = t.constant(Shape::matrix(2, 3), &[0.0; 6]).unwrap();
        let b = t.constant(Shape::matrix(3, 2), &[0.0; 6]).unwrap();
        let err = t.add(a, b).unwrap_err();
        let msg = alloc::format!("{err}");
        assert!(msg.contains("[2x3]") && msg.contains("[3x2]"), "{msg}");
    }

    #[test]
    fn non_scalar_loss_rejected() {
        let mut t = Tape::new();
        let x = t.param(Shape::vector(2), &[1.0, 2.0]).unwrap();
        let y = t.sigmoid(x);
        assert!(matches!(t.backward(y), Err(TensorError::NonScalarLoss { .. })));
    }

    #[test]
    fn empty_tape_rejected() {
        let mut t = Tape::new();
        let x = t.param(Shape::vector(1), &[1.0]).unwrap();
        assert!(matches!(t.backward(x), Err(TensorError::EmptyTape)));
    }

    #[test]
    fn reset_allows_reuse() {
        let mut t = Tape::new();
        for _ in 0..3 {
            let x = t.param(Shape::vector(1), &[2.0]).unwrap();
            let y = t.hadamard(x, x).unwrap();
            let loss = t.sum(y);
            t.backward(loss).unwrap();
            assert_eq!(t.grad(x).unwrap(), &[4.0]);
            t.reset();
        }
    }
}

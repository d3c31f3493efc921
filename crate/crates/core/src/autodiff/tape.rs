//! Define-by-run tape for reverse-mode differentiation.
//!
//! Each forward op computes its value eagerly, stores the result in an
//! arena, and (when any input requires a gradient) records itself so
//! `backward` can replay the ops in strict reverse order. Tapes are cheap
//! and short-lived: one per forward/backward pass.

use std::sync::Arc;

use crate::autodiff::kernels;
use crate::error::{Error, Result};

/// Handle to a tensor stored on a tape.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct TensorId(pub(crate) usize);

/// Tensor storage; parameters are shared so registering them on a tape
/// does not copy the weights.
#[derive(Debug, Clone)]
pub(crate) enum Storage {
    Owned(Vec<f64>),
    Shared(Arc<Vec<f64>>),
}

impl Storage {
    pub(crate) fn as_slice(&self) -> &[f64] {
        match self {
            Storage::Owned(v) => v,
            Storage::Shared(v) => v,
        }
    }
}

/// A tensor on the tape: dense row-major f64 values plus shape.
#[derive(Debug, Clone)]
pub struct Tensor {
    pub(crate) shape: Vec<usize>,
    pub(crate) values: Storage,
    pub(crate) requires_grad: bool,
}

impl Tensor {
    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn values(&self) -> &[f64] {
        self.values.as_slice()
    }

    pub fn requires_grad(&self) -> bool {
        self.requires_grad
    }
}

pub(crate) fn numel(shape: &[usize]) -> usize {
    shape.iter().product()
}

/// Recorded operation: inputs, backward metadata, output id.
#[derive(Debug)]
pub(crate) enum Op {
    Add { a: TensorId, b: TensorId },
    Sub { a: TensorId, b: TensorId },
    Mul { a: TensorId, b: TensorId },
    Scale { a: TensorId, factor: f64 },
    AddBias { a: TensorId, bias: TensorId, cols: usize },
    Matmul { a: TensorId, b: TensorId, m: usize, k: usize, n: usize },
    Conv1d {
        x: TensorId,
        w: TensorId,
        n: usize,
        t: usize,
        c_in: usize,
        c_out: usize,
        k: usize,
        stride: usize,
        dilation: usize,
        pad_left: usize,
        t_out: usize,
    },
    Tanh { a: TensorId },
    Sigmoid { a: TensorId },
    Relu { a: TensorId },
    Softmax { a: TensorId, rows: usize, cols: usize },
    LogSoftmax { a: TensorId, rows: usize, cols: usize },
    TimeSlice { x: TensorId, n: usize, t: usize, m: usize, at: usize },
    SliceCols { a: TensorId, rows: usize, cols: usize, start: usize, len: usize },
    ConcatCols { parts: Vec<(TensorId, usize)>, rows: usize },
    StackChannels { parts: Vec<TensorId>, n: usize, t: usize },
    Transpose { a: TensorId, m: usize, n: usize },
    Sum { a: TensorId },
    Mean { a: TensorId },
    MeanTime { x: TensorId, n: usize, t: usize, c: usize },
    GatherIndex { a: TensorId, rows: usize, cols: usize, idx: Vec<usize> },
    Abs { a: TensorId },
    Sqrt { a: TensorId },
    Reshape { a: TensorId },
}

/// Gradients produced by a backward pass, indexed by `TensorId`.
pub struct Gradients {
    pub(crate) grads: Vec<Option<Vec<f64>>>,
}

impl Gradients {
    pub fn get(&self, id: TensorId) -> Option<&[f64]> {
        self.grads[id.0].as_deref()
    }

    pub fn take(&mut self, id: TensorId) -> Option<Vec<f64>> {
        self.grads[id.0].take()
    }
}

/// The tape itself. See module docs.
#[derive(Default)]
pub struct Tape {
    pub(crate) nodes: Vec<Tensor>,
    pub(crate) ops: Vec<(Op, TensorId)>,
}

impl Tape {
    pub fn new() -> Self {
        Tape::default()
    }

    /// Create a leaf tensor, checking finiteness on entry to the graph.
    pub fn leaf(&mut self, values: Vec<f64>, shape: &[usize], requires_grad: bool) -> Result<TensorId> {
        if values.len() != numel(shape) {
            return Err(Error::ShapeMismatch {
                op: "leaf",
                left: shape.to_vec(),
                right: vec![values.len()],
            });
        }
        if !values.iter().all(|v| v.is_finite()) {
            return Err(Error::NonFinite { op: "leaf" });
        }
        Ok(self.push(Tensor {
            shape: shape.to_vec(),
            values: Storage::Owned(values),
            requires_grad,
        }))
    }

    /// Register shared storage (model parameters) without copying.
    pub fn shared_leaf(
        &mut self,
        values: Arc<Vec<f64>>,
        shape: &[usize],
        requires_grad: bool,
    ) -> Result<TensorId> {
        if values.len() != numel(shape) {
            return Err(Error::ShapeMismatch {
                op: "shared_leaf",
                left: shape.to_vec(),
                right: vec![values.len()],
            });
        }
        Ok(self.push(Tensor {
            shape: shape.to_vec(),
            values: Storage::Shared(values),
            requires_grad,
        }))
    }

    /// Constant (non-differentiable) leaf.
    pub fn constant(&mut self, values: Vec<f64>, shape: &[usize]) -> Result<TensorId> {
        self.leaf(values, shape, false)
    }

    pub(crate) fn push(&mut self, t: Tensor) -> TensorId {
        let id = TensorId(self.nodes.len());
        self.nodes.push(t);
        id
    }

    pub(crate) fn record(&mut self, op: Op, out: TensorId) {
        if self.nodes[out.0].requires_grad {
            self.ops.push((op, out));
        }
    }

    pub fn values(&self, id: TensorId) -> &[f64] {
        self.nodes[id.0].values.as_slice()
    }

    pub fn shape(&self, id: TensorId) -> &[usize] {
        &self.nodes[id.0].shape
    }

    pub fn requires_grad(&self, id: TensorId) -> bool {
        self.nodes[id.0].requires_grad
    }

    pub fn num_ops(&self) -> usize {
        self.ops.len()
    }

    pub(crate) fn any_grad(&self, ids: &[TensorId]) -> bool {
        ids.iter().any(|id| self.nodes[id.0].requires_grad)
    }

    /// Reverse pass from a scalar loss. Consumes the tape; read forward
    /// values before calling. Gradients land on every tensor with
    /// `requires_grad` that the loss depends on.
    pub fn backward(self, loss: TensorId) -> Result<Gradients> {
        if numel(&self.nodes[loss.0].shape) != 1 {
            return Err(Error::contract(format!(
                "backward: loss must be scalar, got shape {:?}",
                self.nodes[loss.0].shape
            )));
        }
        if self.ops.is_empty() {
            return Err(Error::contract("backward: tape is empty"));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(vec![1.0]);

        for (op, out) in self.ops.iter().rev() {
            let d_out = match grads[out.0].take() {
                Some(g) => g,
                None => continue,
            };
            self.backprop(op, *out, &d_out, &mut grads);
            // The output grad is only needed once ops are replayed in strict
            // reverse order; drop it to bound memory.
        }
        Ok(Gradients { grads })
    }

    fn acc(&self, grads: &mut [Option<Vec<f64>>], id: TensorId, add: &[f64]) {
        if !self.nodes[id.0].requires_grad {
            return;
        }
        match &mut grads[id.0] {
            Some(g) => {
                for (gv, &av) in g.iter_mut().zip(add) {
                    *gv += av;
                }
            }
            None => grads[id.0] = Some(add.to_vec()),
        }
    }

    fn backprop(&self, op: &Op, out: TensorId, d_out: &[f64], grads: &mut [Option<Vec<f64>>]) {
        match op {
            Op::Add { a, b } => {
                self.acc(grads, *a, d_out);
                self.acc(grads, *b, d_out);
            }
            Op::Sub { a, b } => {
                self.acc(grads, *a, d_out);
                let neg: Vec<f64> = d_out.iter().map(|v| -v).collect();
                self.acc(grads, *b, &neg);
            }
            Op::Mul { a, b } => {
                let av = self.values(*a);
                let bv = self.values(*b);
                if self.requires_grad(*a) {
                    let da: Vec<f64> = d_out.iter().zip(bv).map(|(d, v)| d * v).collect();
                    self.acc(grads, *a, &da);
                }
                if self.requires_grad(*b) {
                    let db: Vec<f64> = d_out.iter().zip(av).map(|(d, v)| d * v).collect();
                    self.acc(grads, *b, &db);
                }
            }
            Op::Scale { a, factor } => {
                let da: Vec<f64> = d_out.iter().map(|d| d * factor).collect();
                self.acc(grads, *a, &da);
            }
            Op::AddBias { a, bias, cols } => {
                self.acc(grads, *a, d_out);
                if self.requires_grad(*bias) {
                    let mut db = vec![0.0; *cols];
                    for chunk in d_out.chunks_exact(*cols) {
                        for (d, &v) in db.iter_mut().zip(chunk) {
                            *d += v;
                        }
                    }
                    self.acc(grads, *bias, &db);
                }
            }
            Op::Matmul { a, b, m, k, n } => {
                if self.requires_grad(*a) {
                    let mut da = vec![0.0; m * k];
                    kernels::matmul_a_bt_acc(d_out, self.values(*b), &mut da, *m, *n, *k);
                    self.acc(grads, *a, &da);
                }
                if self.requires_grad(*b) {
                    let mut db = vec![0.0; k * n];
                    kernels::matmul_at_b_acc(self.values(*a), d_out, &mut db, *m, *k, *n);
                    self.acc(grads, *b, &db);
                }
            }
            Op::Conv1d {
                x,
                w,
                n,
                t,
                c_in,
                c_out,
                k,
                stride,
                dilation,
                pad_left,
                t_out,
            } => {
                let mut dx = vec![0.0; n * t * c_in];
                let mut dw = vec![0.0; c_out * k * c_in];
                kernels::conv1d_backward(
                    self.values(*x),
                    self.values(*w),
                    d_out,
                    *n,
                    *t,
                    *c_in,
                    *c_out,
                    *k,
                    *stride,
                    *dilation,
                    *pad_left,
                    *t_out,
                    &mut dx,
                    &mut dw,
                );
                self.acc(grads, *x, &dx);
                self.acc(grads, *w, &dw);
            }
            Op::Tanh { a } => {
                let out_v = self.values(out);
                let da: Vec<f64> = d_out
                    .iter()
                    .zip(out_v)
                    .map(|(d, &y)| d * (1.0 - y * y))
                    .collect();
                self.acc(grads, *a, &da);
            }
            Op::Sigmoid { a } => {
                let out_v = self.values(out);
                let da: Vec<f64> = d_out
                    .iter()
                    .zip(out_v)
                    .map(|(d, &y)| d * y * (1.0 - y))
                    .collect();
                self.acc(grads, *a, &da);
            }
            Op::Relu { a } => {
                let av = self.values(*a);
                let da: Vec<f64> = d_out
                    .iter()
                    .zip(av)
                    .map(|(d, &x)| if x > 0.0 { *d } else { 0.0 })
                    .collect();
                self.acc(grads, *a, &da);
            }
            Op::Softmax { a, rows, cols } => {
                let y = self.values(out);
                let mut da = vec![0.0; rows * cols];
                for r in 0..*rows {
                    let base = r * cols;
                    let mut dot = 0.0;
                    for c in 0..*cols {
                        dot += d_out[base + c] * y[base + c];
                    }
                    for c in 0..*cols {
                        da[base + c] = y[base + c] * (d_out[base + c] - dot);
                    }
                }
                self.acc(grads, *a, &da);
            }
            Op::LogSoftmax { a, rows, cols } => {
                let y = self.values(out);
                let mut da = vec![0.0; rows * cols];
                for r in 0..*rows {
                    let base = r * cols;
                    let sum_d: f64 = d_out[base..base + cols].iter().sum();
                    for c in 0..*cols {
                        da[base + c] = d_out[base + c] - y[base + c].exp() * sum_d;
                    }
                }
                self.acc(grads, *a, &da);
            }
            Op::TimeSlice { x, n, t, m, at } => {
                let mut dx = vec![0.0; n * t * m];
                for b in 0..*n {
                    let dst = &mut dx[(b * t + at) * m..(b * t + at) * m + m];
                    dst.copy_from_slice(&d_out[b * m..(b + 1) * m]);
                }
                self.acc(grads, *x, &dx);
            }
            Op::SliceCols { a, rows, cols, start, len } => {
                let mut da = vec![0.0; rows * cols];
                for r in 0..*rows {
                    da[r * cols + start..r * cols + start + len]
                        .copy_from_slice(&d_out[r * len..(r + 1) * len]);
                }
                self.acc(grads, *a, &da);
            }
            Op::ConcatCols { parts, rows } => {
                let total: usize = parts.iter().map(|(_, c)| c).sum();
                let mut offset = 0;
                for (id, c) in parts {
                    if self.requires_grad(*id) {
                        let mut dp = vec![0.0; rows * c];
                        for r in 0..*rows {
                            dp[r * c..(r + 1) * c]
                                .copy_from_slice(&d_out[r * total + offset..r * total + offset + c]);
                        }
                        self.acc(grads, *id, &dp);
                    }
                    offset += c;
                }
            }
            Op::StackChannels { parts, n, t } => {
                let m = parts.len();
                for (ch, id) in parts.iter().enumerate() {
                    if self.requires_grad(*id) {
                        let mut dp = vec![0.0; n * t];
                        for b in 0..*n {
                            for step in 0..*t {
                                dp[b * t + step] = d_out[(b * t + step) * m + ch];
                            }
                        }
                        self.acc(grads, *id, &dp);
                    }
                }
            }
            Op::Transpose { a, m, n } => {
                let da = kernels::transpose(d_out, *n, *m);
                self.acc(grads, *a, &da);
            }
            Op::Sum { a } => {
                let g = d_out[0];
                let da = vec![g; numel(self.shape(*a))];
                self.acc(grads, *a, &da);
            }
            Op::Mean { a } => {
                let count = numel(self.shape(*a));
                let g = d_out[0] / count as f64;
                let da = vec![g; count];
                self.acc(grads, *a, &da);
            }
            Op::MeanTime { x, n, t, c } => {
                let mut dx = vec![0.0; n * t * c];
                let inv = 1.0 / *t as f64;
                for b in 0..*n {
                    for step in 0..*t {
                        for ch in 0..*c {
                            dx[(b * t + step) * c + ch] = d_out[b * c + ch] * inv;
                        }
                    }
                }
                self.acc(grads, *x, &dx);
            }
            Op::GatherIndex { a, rows, cols, idx } => {
                let mut da = vec![0.0; rows * cols];
                for (r, &j) in idx.iter().enumerate() {
                    da[r * cols + j] += d_out[r];
                }
                self.acc(grads, *a, &da);
            }
            Op::Abs { a } => {
                let av = self.values(*a);
                let da: Vec<f64> = d_out
                    .iter()
                    .zip(av)
                    .map(|(d, &x)| d * if x > 0.0 { 1.0 } else if x < 0.0 { -1.0 } else { 0.0 })
                    .collect();
                self.acc(grads, *a, &da);
            }
            Op::Sqrt { a } => {
                let y = self.values(out);
                let da: Vec<f64> = d_out
                    .iter()
                    .zip(y)
                    .map(|(d, &s)| if s > 0.0 { d / (2.0 * s) } else { 0.0 })
                    .collect();
                self.acc(grads, *a, &da);
            }
            Op::Reshape { a } => {
                self.acc(grads, *a, d_out);
            }
        }
    }
}

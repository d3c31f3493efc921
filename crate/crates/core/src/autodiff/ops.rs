//! Forward implementations of the tape ops.
//!
//! Every method validates operand shapes, computes the output eagerly and
//! records the op when a gradient will be needed.

use crate::autodiff::kernels;
use crate::autodiff::tape::{numel, Op, Storage, Tape, Tensor, TensorId};
use crate::error::{Error, Result};

impl Tape {
    fn emit(&mut self, values: Vec<f64>, shape: Vec<usize>, op: Op, inputs: &[TensorId]) -> TensorId {
        let requires_grad = self.any_grad(inputs);
        let out = self.push(Tensor {
            shape,
            values: Storage::Owned(values),
            requires_grad,
        });
        self.record(op, out);
        out
    }

    fn same_shape(&self, op: &'static str, a: TensorId, b: TensorId) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::ShapeMismatch {
                op,
                left: self.shape(a).to_vec(),
                right: self.shape(b).to_vec(),
            });
        }
        Ok(())
    }

    pub fn add(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        self.same_shape("add", a, b)?;
        let values: Vec<f64> = self
            .values(a)
            .iter()
            .zip(self.values(b))
            .map(|(x, y)| x + y)
            .collect();
        let shape = self.shape(a).to_vec();
        Ok(self.emit(values, shape, Op::Add { a, b }, &[a, b]))
    }

    pub fn sub(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        self.same_shape("sub", a, b)?;
        let values: Vec<f64> = self
            .values(a)
            .iter()
            .zip(self.values(b))
            .map(|(x, y)| x - y)
            .collect();
        let shape = self.shape(a).to_vec();
        Ok(self.emit(values, shape, Op::Sub { a, b }, &[a, b]))
    }

    pub fn mul(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        self.same_shape("mul", a, b)?;
        let values: Vec<f64> = self
            .values(a)
            .iter()
            .zip(self.values(b))
            .map(|(x, y)| x * y)
            .collect();
        let shape = self.shape(a).to_vec();
        Ok(self.emit(values, shape, Op::Mul { a, b }, &[a, b]))
    }

    pub fn scale(&mut self, a: TensorId, factor: f64) -> Result<TensorId> {
        let values: Vec<f64> = self.values(a).iter().map(|x| x * factor).collect();
        let shape = self.shape(a).to_vec();
        Ok(self.emit(values, shape, Op::Scale { a, factor }, &[a]))
    }

    /// Broadcast-add a length-C bias over the last dimension.
    pub fn add_bias(&mut self, a: TensorId, bias: TensorId) -> Result<TensorId> {
        let cols = *self.shape(a).last().unwrap_or(&0);
        if self.shape(bias) != [cols] {
            return Err(Error::ShapeMismatch {
                op: "add_bias",
                left: self.shape(a).to_vec(),
                right: self.shape(bias).to_vec(),
            });
        }
        let bv = self.values(bias).to_vec();
        let values: Vec<f64> = self
            .values(a)
            .chunks_exact(cols)
            .flat_map(|row| row.iter().zip(&bv).map(|(x, y)| x + y).collect::<Vec<_>>())
            .collect();
        let shape = self.shape(a).to_vec();
        Ok(self.emit(values, shape, Op::AddBias { a, bias, cols }, &[a, bias]))
    }

    pub fn matmul(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(Error::ShapeMismatch {
                op: "matmul",
                left: sa.to_vec(),
                right: sb.to_vec(),
            });
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let values = kernels::matmul(self.values(a), self.values(b), m, k, n);
        Ok(self.emit(values, vec![m, n], Op::Matmul { a, b, m, k, n }, &[a, b]))
    }

    /// 1-D convolution; `x` is (N, T, C_in), `w` is (C_out, K, C_in).
    pub fn conv1d(
        &mut self,
        x: TensorId,
        w: TensorId,
        stride: usize,
        dilation: usize,
        pad_left: usize,
        pad_right: usize,
    ) -> Result<TensorId> {
        let (sx, sw) = (self.shape(x), self.shape(w));
        if sx.len() != 3 || sw.len() != 3 || sx[2] != sw[2] {
            return Err(Error::ShapeMismatch {
                op: "conv1d",
                left: sx.to_vec(),
                right: sw.to_vec(),
            });
        }
        let (n, t, c_in) = (sx[0], sx[1], sx[2]);
        let (c_out, k) = (sw[0], sw[1]);
        let span = (k - 1) * dilation + 1;
        if t + pad_left + pad_right < span {
            return Err(Error::ShapeMismatch {
                op: "conv1d",
                left: sx.to_vec(),
                right: sw.to_vec(),
            });
        }
        let t_out = (t + pad_left + pad_right - span) / stride + 1;
        let values = kernels::conv1d(
            self.values(x),
            self.values(w),
            n,
            t,
            c_in,
            c_out,
            k,
            stride,
            dilation,
            pad_left,
            t_out,
        );
        Ok(self.emit(
            values,
            vec![n, t_out, c_out],
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
            },
            &[x, w],
        ))
    }

    pub fn tanh(&mut self, a: TensorId) -> Result<TensorId> {
        let values: Vec<f64> = self.values(a).iter().map(|x| x.tanh()).collect();
        let shape = self.shape(a).to_vec();
        Ok(self.emit(values, shape, Op::Tanh { a }, &[a]))
    }

    pub fn sigmoid(&mut self, a: TensorId) -> Result<TensorId> {
        let values: Vec<f64> = self
            .values(a)
            .iter()
            .map(|x| 1.0 / (1.0 + (-x).exp()))
            .collect();
        let shape = self.shape(a).to_vec();
        Ok(self.emit(values, shape, Op::Sigmoid { a }, &[a]))
    }

    pub fn relu(&mut self, a: TensorId) -> Result<TensorId> {
        let values: Vec<f64> = self.values(a).iter().map(|x| x.max(0.0)).collect();
        let shape = self.shape(a).to_vec();
        Ok(self.emit(values, shape, Op::Relu { a }, &[a]))
    }

    fn rows_cols(&self, op: &'static str, a: TensorId) -> Result<(usize, usize)> {
        let s = self.shape(a);
        if s.len() != 2 {
            return Err(Error::ShapeMismatch {
                op,
                left: s.to_vec(),
                right: vec![],
            });
        }
        Ok((s[0], s[1]))
    }

    pub fn softmax(&mut self, a: TensorId) -> Result<TensorId> {
        let (rows, cols) = self.rows_cols("softmax", a)?;
        let values = kernels::softmax_rows(self.values(a), rows, cols);
        Ok(self.emit(values, vec![rows, cols], Op::Softmax { a, rows, cols }, &[a]))
    }

    pub fn log_softmax(&mut self, a: TensorId) -> Result<TensorId> {
        let (rows, cols) = self.rows_cols("log_softmax", a)?;
        let values = kernels::log_softmax_rows(self.values(a), rows, cols);
        Ok(self.emit(values, vec![rows, cols], Op::LogSoftmax { a, rows, cols }, &[a]))
    }

    /// Slice time step `at` out of an (N, T, M) tensor, yielding (N, M).
    pub fn time_slice(&mut self, x: TensorId, at: usize) -> Result<TensorId> {
        let s = self.shape(x);
        if s.len() != 3 || at >= s[1] {
            return Err(Error::ShapeMismatch {
                op: "time_slice",
                left: s.to_vec(),
                right: vec![at],
            });
        }
        let (n, t, m) = (s[0], s[1], s[2]);
        let xv = self.values(x);
        let mut values = Vec::with_capacity(n * m);
        for b in 0..n {
            values.extend_from_slice(&xv[(b * t + at) * m..(b * t + at) * m + m]);
        }
        Ok(self.emit(values, vec![n, m], Op::TimeSlice { x, n, t, m, at }, &[x]))
    }

    /// Slice a column range out of an (R, C) tensor.
    pub fn slice_cols(&mut self, a: TensorId, start: usize, len: usize) -> Result<TensorId> {
        let (rows, cols) = self.rows_cols("slice_cols", a)?;
        if start + len > cols {
            return Err(Error::ShapeMismatch {
                op: "slice_cols",
                left: vec![rows, cols],
                right: vec![start, len],
            });
        }
        let av = self.values(a);
        let mut values = Vec::with_capacity(rows * len);
        for r in 0..rows {
            values.extend_from_slice(&av[r * cols + start..r * cols + start + len]);
        }
        Ok(self.emit(
            values,
            vec![rows, len],
            Op::SliceCols { a, rows, cols, start, len },
            &[a],
        ))
    }

    /// Concatenate 2-D tensors with equal row counts along columns.
    pub fn concat_cols(&mut self, parts: &[TensorId]) -> Result<TensorId> {
        if parts.is_empty() {
            return Err(Error::contract("concat_cols: no inputs"));
        }
        let rows = self.shape(parts[0])[0];
        let mut widths = Vec::with_capacity(parts.len());
        for &p in parts {
            let (r, c) = self.rows_cols("concat_cols", p)?;
            if r != rows {
                return Err(Error::ShapeMismatch {
                    op: "concat_cols",
                    left: self.shape(parts[0]).to_vec(),
                    right: self.shape(p).to_vec(),
                });
            }
            widths.push(c);
        }
        let total: usize = widths.iter().sum();
        let mut values = Vec::with_capacity(rows * total);
        for r in 0..rows {
            for (&p, &c) in parts.iter().zip(&widths) {
                let pv = self.values(p);
                values.extend_from_slice(&pv[r * c..(r + 1) * c]);
            }
        }
        let op = Op::ConcatCols {
            parts: parts.iter().copied().zip(widths).collect(),
            rows,
        };
        Ok(self.emit(values, vec![rows, total], op, parts))
    }

    /// Interleave M tensors of shape (N, T) into an (N, T, M) tensor.
    pub fn stack_channels(&mut self, parts: &[TensorId]) -> Result<TensorId> {
        if parts.is_empty() {
            return Err(Error::contract("stack_channels: no inputs"));
        }
        let (n, t) = self.rows_cols("stack_channels", parts[0])?;
        for &p in parts {
            self.same_shape("stack_channels", parts[0], p)?;
        }
        let m = parts.len();
        let mut values = vec![0.0; n * t * m];
        for (ch, &p) in parts.iter().enumerate() {
            let pv = self.values(p);
            for b in 0..n {
                for step in 0..t {
                    values[(b * t + step) * m + ch] = pv[b * t + step];
                }
            }
        }
        let op = Op::StackChannels {
            parts: parts.to_vec(),
            n,
            t,
        };
        Ok(self.emit(values, vec![n, t, m], op, parts))
    }

    pub fn transpose(&mut self, a: TensorId) -> Result<TensorId> {
        let (m, n) = self.rows_cols("transpose", a)?;
        let values = kernels::transpose(self.values(a), m, n);
        Ok(self.emit(values, vec![n, m], Op::Transpose { a, m, n }, &[a]))
    }

    pub fn sum(&mut self, a: TensorId) -> Result<TensorId> {
        let total: f64 = self.values(a).iter().sum();
        Ok(self.emit(vec![total], vec![1], Op::Sum { a }, &[a]))
    }

    pub fn mean(&mut self, a: TensorId) -> Result<TensorId> {
        let count = numel(self.shape(a));
        if count == 0 {
            return Err(Error::contract("mean: empty tensor"));
        }
        let total: f64 = self.values(a).iter().sum();
        Ok(self.emit(vec![total / count as f64], vec![1], Op::Mean { a }, &[a]))
    }

    /// Mean over the time axis of an (N, T, C) tensor, yielding (N, C).
    pub fn mean_time(&mut self, x: TensorId) -> Result<TensorId> {
        let s = self.shape(x);
        if s.len() != 3 {
            return Err(Error::ShapeMismatch {
                op: "mean_time",
                left: s.to_vec(),
                right: vec![],
            });
        }
        let (n, t, c) = (s[0], s[1], s[2]);
        let xv = self.values(x);
        let mut values = vec![0.0; n * c];
        for b in 0..n {
            for step in 0..t {
                for ch in 0..c {
                    values[b * c + ch] += xv[(b * t + step) * c + ch];
                }
            }
        }
        for v in values.iter_mut() {
            *v /= t as f64;
        }
        Ok(self.emit(values, vec![n, c], Op::MeanTime { x, n, t, c }, &[x]))
    }

    /// Per-row element pick: out[r] = a[r, idx[r]].
    pub fn gather_index(&mut self, a: TensorId, idx: &[usize]) -> Result<TensorId> {
        let (rows, cols) = self.rows_cols("gather_index", a)?;
        if idx.len() != rows || idx.iter().any(|&j| j >= cols) {
            return Err(Error::contract(format!(
                "gather_index: {} indices for {} rows of width {}",
                idx.len(),
                rows,
                cols
            )));
        }
        let av = self.values(a);
        let values: Vec<f64> = idx.iter().enumerate().map(|(r, &j)| av[r * cols + j]).collect();
        let op = Op::GatherIndex {
            a,
            rows,
            cols,
            idx: idx.to_vec(),
        };
        Ok(self.emit(values, vec![rows], op, &[a]))
    }

    pub fn abs(&mut self, a: TensorId) -> Result<TensorId> {
        let values: Vec<f64> = self.values(a).iter().map(|x| x.abs()).collect();
        let shape = self.shape(a).to_vec();
        Ok(self.emit(values, shape, Op::Abs { a }, &[a]))
    }

    pub fn sqrt(&mut self, a: TensorId) -> Result<TensorId> {
        let values: Vec<f64> = self.values(a).iter().map(|x| x.max(0.0).sqrt()).collect();
        let shape = self.shape(a).to_vec();
        Ok(self.emit(values, shape, Op::Sqrt { a }, &[a]))
    }

    /// Reinterpret the value buffer under a new shape of equal size.
    pub fn reshape(&mut self, a: TensorId, shape: &[usize]) -> Result<TensorId> {
        if numel(shape) != numel(self.shape(a)) {
            return Err(Error::ShapeMismatch {
                op: "reshape",
                left: self.shape(a).to_vec(),
                right: shape.to_vec(),
            });
        }
        let values = self.values(a).to_vec();
        Ok(self.emit(values, shape.to_vec(), Op::Reshape { a }, &[a]))
    }

    /// Summed cross entropy of (N, C) logits against integer labels.
    ///
    /// Sum (not mean) keeps per-sample gradients independent of the batch
    /// size, which the per-sample trigger optimizers rely on.
    pub fn cross_entropy_sum(&mut self, logits: TensorId, labels: &[usize]) -> Result<TensorId> {
        let ls = self.log_softmax(logits)?;
        let picked = self.gather_index(ls, labels)?;
        let total = self.sum(picked)?;
        self.scale(total, -1.0)
    }

    /// Mean cross entropy of (N, C) logits against integer labels.
    pub fn cross_entropy_mean(&mut self, logits: TensorId, labels: &[usize]) -> Result<TensorId> {
        let ls = self.log_softmax(logits)?;
        let picked = self.gather_index(ls, labels)?;
        let total = self.mean(picked)?;
        self.scale(total, -1.0)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn leaf(tape: &mut Tape, v: &[f64], shape: &[usize]) -> TensorId {
        tape.leaf(v.to_vec(), shape, true).unwrap()
    }

    #[test]
    fn matmul_example() {
        let mut tape = Tape::new();
        let a = leaf(&mut tape, &[1.0, 2.0, 3.0, 4.0], &[2, 2]);
        let b = leaf(&mut tape, &[1.0, 1.0], &[2, 1]);
        let c = tape.matmul(a, b).unwrap();
        assert_eq!(tape.values(c), &[3.0, 7.0]);
    }

    #[test]
    fn shape_mismatch_names_both_shapes() {
        let mut tape = Tape::new();
        let a = leaf(&mut tape, &[1.0, 2.0], &[1, 2]);
        let b = leaf(&mut tape, &[1.0, 2.0, 3.0], &[1, 3]);
        let err = tape.add(a, b).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("[1, 2]") && msg.contains("[1, 3]"), "{msg}");
    }

    #[test]
    fn non_finite_leaf_rejected() {
        let mut tape = Tape::new();
        assert!(tape.leaf(vec![1.0, f64::NAN], &[2], false).is_err());
    }

    #[test]
    fn backward_square_sum() {
        // loss = sum(x .* x), x = [1,2,3] -> grad = [2,4,6]
        let mut tape = Tape::new();
        let x = leaf(&mut tape, &[1.0, 2.0, 3.0], &[3]);
        let sq = tape.mul(x, x).unwrap();
        let loss = tape.sum(sq).unwrap();
        let grads = tape.backward(loss).unwrap();
        assert_eq!(grads.get(x).unwrap(), &[2.0, 4.0, 6.0]);
    }

    #[test]
    fn backward_rejects_non_scalar_loss() {
        let mut tape = Tape::new();
        let x = leaf(&mut tape, &[1.0, 2.0], &[2]);
        let y = tape.scale(x, 2.0).unwrap();
        assert!(tape.backward(y).is_err());
    }

    #[test]
    fn grad_of_unused_leaf_is_none() {
        let mut tape = Tape::new();
        let x = leaf(&mut tape, &[1.0, 2.0], &[2]);
        let unused = leaf(&mut tape, &[5.0], &[1]);
        let sq = tape.mul(x, x).unwrap();
        let loss = tape.sum(sq).unwrap();
        let grads = tape.backward(loss).unwrap();
        // Loss does not depend on `unused`: d loss / d unused = 0.
        assert!(grads.get(unused).is_none());
    }

    #[test]
    fn backward_linearity() {
        // grad of a*f + b*g equals a*grad(f) + b*grad(g).
        let x0 = [0.3, -0.7, 1.1];
        let (a, b) = (2.5, -1.25);

        let grad_of = |build: &dyn Fn(&mut Tape, TensorId) -> TensorId| -> Vec<f64> {
            let mut tape = Tape::new();
            let x = leaf(&mut tape, &x0, &[3]);
            let loss = build(&mut tape, x);
            tape.backward(loss).unwrap().get(x).unwrap().to_vec()
        };

        let f = |tape: &mut Tape, x: TensorId| {
            let sq = tape.mul(x, x).unwrap();
            tape.sum(sq).unwrap()
        };
        let g = |tape: &mut Tape, x: TensorId| {
            let t = tape.tanh(x).unwrap();
            tape.sum(t).unwrap()
        };
        let combined = |tape: &mut Tape, x: TensorId| {
            let fa = f(tape, x);
            let fa = tape.scale(fa, a).unwrap();
            let gb = g(tape, x);
            let gb = tape.scale(gb, b).unwrap();
            tape.add(fa, gb).unwrap()
        };

        let gf = grad_of(&f);
        let gg = grad_of(&g);
        let gc = grad_of(&combined);
        for i in 0..3 {
            assert!((gc[i] - (a * gf[i] + b * gg[i])).abs() < 1e-12);
        }
    }

    #[test]
    fn gather_and_concat_roundtrip() {
        let mut tape = Tape::new();
        let a = leaf(&mut tape, &[1.0, 2.0, 3.0, 4.0], &[2, 2]);
        let left = tape.slice_cols(a, 0, 1).unwrap();
        let right = tape.slice_cols(a, 1, 1).unwrap();
        let back = tape.concat_cols(&[left, right]).unwrap();
        assert_eq!(tape.values(back), tape.values(a));

        let picked = tape.gather_index(a, &[1, 0]).unwrap();
        assert_eq!(tape.values(picked), &[2.0, 3.0]);
    }

    #[test]
    fn cross_entropy_matches_kernel() {
        let logits = [0.2, -0.4, 1.0, 0.0, 0.3, -0.3];
        let labels = [2usize, 1];
        let mut tape = Tape::new();
        let l = leaf(&mut tape, &logits, &[2, 3]);
        let ce = tape.cross_entropy_mean(l, &labels).unwrap();
        let expect = kernels::ce_losses(&logits, &labels, 3);
        let mean = (expect[0] + expect[1]) / 2.0;
        assert!((tape.values(ce)[0] - mean).abs() < 1e-12);
    }

    #[test]
    fn stack_channels_layout() {
        let mut tape = Tape::new();
        let c0 = leaf(&mut tape, &[1.0, 2.0], &[1, 2]);
        let c1 = leaf(&mut tape, &[10.0, 20.0], &[1, 2]);
        let s = tape.stack_channels(&[c0, c1]).unwrap();
        assert_eq!(tape.shape(s), &[1, 2, 2]);
        assert_eq!(tape.values(s), &[1.0, 10.0, 2.0, 20.0]);
    }
}

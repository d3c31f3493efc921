//! Forward graphs for the recurrent classifiers.

use crate::autodiff::{Tape, TensorId};
use crate::error::Result;
use crate::models::{Bindings, Classifier};

struct Bound<'a> {
    model: &'a Classifier,
    trainable: bool,
    bindings: Bindings,
}

impl<'a> Bound<'a> {
    fn new(model: &'a Classifier, trainable: bool) -> Self {
        Bound {
            model,
            trainable,
            bindings: Vec::new(),
        }
    }

    fn bind(&mut self, tape: &mut Tape, name: &str) -> Result<TensorId> {
        let id = self.model.params.bind(tape, name, self.trainable)?;
        if self.trainable {
            self.bindings.push((name.to_string(), id));
        }
        Ok(id)
    }
}

/// One vanilla tanh RNN direction; returns the final hidden state (N, H).
fn rnn_direction(
    tape: &mut Tape,
    x: TensorId,
    w_ih: TensorId,
    w_hh: TensorId,
    bias: TensorId,
    reverse: bool,
) -> Result<TensorId> {
    let (n, t) = (tape.shape(x)[0], tape.shape(x)[1]);
    let h_dim = tape.shape(w_hh)[0];
    let mut h = tape.constant(vec![0.0; n * h_dim], &[n, h_dim])?;
    let steps: Vec<usize> = if reverse {
        (0..t).rev().collect()
    } else {
        (0..t).collect()
    };
    for step in steps {
        let x_t = tape.time_slice(x, step)?;
        let from_input = tape.matmul(x_t, w_ih)?;
        let from_state = tape.matmul(h, w_hh)?;
        let z = tape.add(from_input, from_state)?;
        let z = tape.add_bias(z, bias)?;
        h = tape.tanh(z)?;
    }
    Ok(h)
}

/// Bidirectional vanilla RNN: concat of the two final hidden states feeds
/// a linear head.
pub(super) fn birnn_graph(
    model: &Classifier,
    tape: &mut Tape,
    x: TensorId,
    trainable: bool,
) -> Result<(TensorId, Bindings)> {
    let mut bound = Bound::new(model, trainable);
    let w_ih_f = bound.bind(tape, "fwd.w_ih")?;
    let w_hh_f = bound.bind(tape, "fwd.w_hh")?;
    let b_f = bound.bind(tape, "fwd.b")?;
    let w_ih_b = bound.bind(tape, "bwd.w_ih")?;
    let w_hh_b = bound.bind(tape, "bwd.w_hh")?;
    let b_b = bound.bind(tape, "bwd.b")?;
    let head_w = bound.bind(tape, "head.w")?;
    let head_b = bound.bind(tape, "head.b")?;

    let h_fwd = rnn_direction(tape, x, w_ih_f, w_hh_f, b_f, false)?;
    let h_bwd = rnn_direction(tape, x, w_ih_b, w_hh_b, b_b, true)?;
    let features = tape.concat_cols(&[h_fwd, h_bwd])?;
    let logits = tape.matmul(features, head_w)?;
    let logits = tape.add_bias(logits, head_b)?;
    Ok((logits, bound.bindings))
}

/// Single-layer LSTM; the final hidden state feeds a linear head.
/// Gate layout in the fused weight matrices is [input, forget, cell, output].
pub(super) fn lstm_graph(
    model: &Classifier,
    tape: &mut Tape,
    x: TensorId,
    trainable: bool,
) -> Result<(TensorId, Bindings)> {
    let mut bound = Bound::new(model, trainable);
    let w_ih = bound.bind(tape, "lstm.w_ih")?;
    let w_hh = bound.bind(tape, "lstm.w_hh")?;
    let bias = bound.bind(tape, "lstm.b")?;
    let head_w = bound.bind(tape, "head.w")?;
    let head_b = bound.bind(tape, "head.b")?;

    let (n, t) = (tape.shape(x)[0], tape.shape(x)[1]);
    let h_dim = model.spec.hidden;
    let mut h = tape.constant(vec![0.0; n * h_dim], &[n, h_dim])?;
    let mut cell = tape.constant(vec![0.0; n * h_dim], &[n, h_dim])?;
    for step in 0..t {
        let x_t = tape.time_slice(x, step)?;
        let from_input = tape.matmul(x_t, w_ih)?;
        let from_state = tape.matmul(h, w_hh)?;
        let z = tape.add(from_input, from_state)?;
        let z = tape.add_bias(z, bias)?;

        let zi = tape.slice_cols(z, 0, h_dim)?;
        let zf = tape.slice_cols(z, h_dim, h_dim)?;
        let zg = tape.slice_cols(z, 2 * h_dim, h_dim)?;
        let zo = tape.slice_cols(z, 3 * h_dim, h_dim)?;
        let gate_i = tape.sigmoid(zi)?;
        let gate_f = tape.sigmoid(zf)?;
        let gate_g = tape.tanh(zg)?;
        let gate_o = tape.sigmoid(zo)?;

        let keep = tape.mul(gate_f, cell)?;
        let write = tape.mul(gate_i, gate_g)?;
        cell = tape.add(keep, write)?;
        let cell_act = tape.tanh(cell)?;
        h = tape.mul(gate_o, cell_act)?;
    }
    let logits = tape.matmul(h, head_w)?;
    let logits = tape.add_bias(logits, head_b)?;
    Ok((logits, bound.bindings))
}

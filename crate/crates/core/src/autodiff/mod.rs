//! Dense-tensor math with reverse-mode automatic differentiation.

pub mod kernels;
mod ops;
mod tape;

pub use tape::{Gradients, Tape, Tensor, TensorId};

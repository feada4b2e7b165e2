//! Reverse-mode automatic differentiation over small dense `f64` tensors.
//!
//! A [`Tape`] records every op applied during a forward pass; `backward`
//! walks it in reverse and leaves gradients on the differentiable leaves.
//! Parameters live in a [`ParamStore`] and are re-bound onto a fresh tape
//! for each step.

mod gru;
mod params;
mod tape;
mod tensor;

use thiserror::Error;

pub use gru::{gru_cell, GruCellParams};
pub use params::{Bound, Linear, Mlp, ParamId, ParamStore};
pub use tape::{gumbel_noise, OpKind, Tape, Var};
pub use tensor::{argmax, Tensor};

#[derive(Debug, Error)]
pub enum AutodiffError {
    #[error("{op}: shape mismatch between {lhs:?} and {rhs:?}")]
    ShapeMismatch {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },
    #[error("unknown op kind `{0}`")]
    UnknownOp(String),
    #[error("{op} expects {expected} inputs, got {got}")]
    Arity {
        op: &'static str,
        expected: usize,
        got: usize,
    },
    #[error("shape {shape:?} does not hold {len} values")]
    InvalidShape { shape: Vec<usize>, len: usize },
    #[error("expected a scalar, got shape {0:?}")]
    NotScalar(Vec<usize>),
    #[error("temperature must be positive and finite, got {0}")]
    InvalidTemperature(f64),
    #[error("{op}: index {index} out of range (< {bound})")]
    IndexOutOfRange {
        op: &'static str,
        index: usize,
        bound: usize,
    },
    #[error("{op}: {value} is not a valid index")]
    InvalidIndex { op: &'static str, value: f64 },
    #[error("checkpoint parameter `{name}` has shape {found:?}, expected {expected:?}")]
    CheckpointShape {
        name: String,
        expected: Vec<usize>,
        found: Vec<usize>,
    },
    #[error("checkpoint is missing parameter `{0}`")]
    CheckpointMissing(String),
    #[error("checkpoint has unexpected parameter `{0}`")]
    CheckpointUnexpected(String),
    #[error("checkpoint: {0}")]
    CheckpointFormat(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

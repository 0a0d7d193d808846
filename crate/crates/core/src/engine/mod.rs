//! Dense `f64` tensors with tape-based reverse-mode differentiation.
//!
//! The operation set is deliberately small: exactly what the forecaster
//! needs (linear maps, GeLU, dropout, reductions, instance statistics,
//! softmax, stacking, cycle gathers and the two-row convolution), each with
//! an exact adjoint. Any non-finite value produced by an operation is
//! reported as [`EngineError::NonFinite`] instead of propagating.

mod graph;
pub(crate) mod kernels;
mod tensor;

pub mod gradcheck;

pub use graph::{ConvLayout, Graph, Var};
pub use tensor::{Tensor, MAX_RANK};

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum EngineError {
    #[error("{op}: shape mismatch {left:?} vs {right:?}")]
    ShapeMismatch {
        op: &'static str,
        left: Vec<usize>,
        right: Vec<usize>,
    },
    #[error("buffer of length {len} does not fit shape {shape:?}")]
    BufferLength { shape: Vec<usize>, len: usize },
    #[error("rank {rank} exceeds the supported maximum of {}", MAX_RANK)]
    RankTooHigh { rank: usize },
    #[error("{op}: produced a non-finite value")]
    NonFinite { op: &'static str },
    #[error("backward needs a scalar loss, got shape {shape:?}")]
    NonScalarLoss { shape: Vec<usize> },
    #[error("{op}: index {index} out of range for {len} rows")]
    IndexOutOfRange {
        op: &'static str,
        index: usize,
        len: usize,
    },
    #[error("{op}: {msg}")]
    Invalid { op: &'static str, msg: String },
}

//! Reverse-mode automatic differentiation on dense f64 tensors.
//!
//! A [`Tape`] owns every intermediate value of a computation as a flat arena
//! of nodes. Operations append nodes and return [`NodeId`] handles; calling
//! [`Tape::backward`] on a scalar root walks the arena in reverse insertion
//! order and accumulates adjoints. Tapes are cheap and meant to be rebuilt
//! per training step rather than reused.

mod tape;
mod tensor;

pub use tape::{NodeId, Tape};
pub use tensor::{matmul, Tensor};

use thiserror::Error;

/// Errors raised while building or differentiating a computation.
#[derive(Debug, Error, Clone, PartialEq)]
pub enum GradError {
    #[error("{op}: shape mismatch between {lhs:?} and {rhs:?}")]
    ShapeMismatch {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },
    #[error("{op}: expected rank-{expected} operand, got shape {shape:?}")]
    BadRank {
        op: &'static str,
        expected: usize,
        shape: Vec<usize>,
    },
    #[error("{op}: axis {axis} out of range for rank {rank}")]
    AxisOutOfRange {
        op: &'static str,
        axis: usize,
        rank: usize,
    },
    #[error("{op}: domain error, operand must be strictly positive")]
    NonPositive { op: &'static str },
    #[error("shape {shape:?} does not match data length {len}")]
    ShapeDataMismatch { shape: Vec<usize>, len: usize },
    #[error("class label {label} out of range for {classes} classes")]
    LabelOutOfRange { label: usize, classes: usize },
    #[error("label count {labels} does not match batch size {batch}")]
    LabelCountMismatch { labels: usize, batch: usize },
    #[error("backward root must be a scalar, got shape {shape:?}")]
    NonScalarRoot { shape: Vec<usize> },
    #[error("empty tensor is not allowed here")]
    Empty,
}

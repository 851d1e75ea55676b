//! Dense tensors and reverse-mode gradients for the handful of operations the
//! network needs.

mod graph;
mod params;
mod tensor;

pub use graph::{sigmoid, Gradients, Graph, Var, MASK_CUTOFF, MASK_VALUE};
pub use params::{GradBuffer, Param, ParamId, ParamStore};
pub use tensor::Tensor;

use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum DiffError {
    #[error("{op}: incompatible shapes {left:?} and {right:?}")]
    Shape {
        op: &'static str,
        left: Vec<usize>,
        right: Vec<usize>,
    },
    #[error("{op}: expected rank {expected}, got shape {shape:?}")]
    Rank {
        op: &'static str,
        expected: usize,
        shape: Vec<usize>,
    },
    #[error("{op}: axis {axis} invalid for rank {rank}")]
    Axis { op: &'static str, axis: usize, rank: usize },
    #[error("shape {shape:?} has a zero extent")]
    EmptyExtent { shape: Vec<usize> },
    #[error("shape {shape:?} does not match data length {len}")]
    DataLength { shape: Vec<usize>, len: usize },
    #[error("{op}: every position of a slice is masked")]
    DegenerateMask { op: &'static str },
    #[error("{op}: produced a non-finite value")]
    NonFinite { op: &'static str },
    #[error("backward requires a scalar loss, got shape {shape:?}")]
    NotScalar { shape: Vec<usize> },
    #[error("{op}: index {index} out of range (bound {bound})")]
    IndexOutOfRange {
        op: &'static str,
        index: usize,
        bound: usize,
    },
    #[error("{0}")]
    Contract(String),
}

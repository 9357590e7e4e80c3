//! Reverse-mode automatic differentiation over small dense tensors.
//!
//! A [`Graph`] is a define-by-run tape: every operation appends a node
//! holding its forward value, and [`Graph::backward`] walks the tape once in
//! reverse, accumulating gradients into named leaves. Everything is `f64`
//! and single-threaded; a graph is built, differentiated and dropped within
//! one training step.

mod gradcheck;
mod graph;
mod param;
pub mod special;
mod tensor;

pub use gradcheck::{grad_check, GradCheckEntry, GradReport, DEFAULT_FD_STEP};
pub use graph::{Graph, NodeId};
pub use param::{HasParams, Param, ParamList};
pub(crate) use param::standard_normal;
pub use tensor::Tensor;

/// Errors raised while building or differentiating a graph.
#[derive(Debug, thiserror::Error)]
pub enum DiffError {
    #[error("{op}: shape mismatch {lhs:?} vs {rhs:?}")]
    ShapeMismatch {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },

    #[error("{op}: invalid shape {shape:?}: {msg}")]
    InvalidShape {
        op: &'static str,
        shape: Vec<usize>,
        msg: String,
    },

    #[error("{op}: produced a non-finite value")]
    NonFinite { op: &'static str },

    #[error("{op}: input {value} outside domain")]
    Domain { op: &'static str, value: f64 },

    #[error("backward requires a scalar loss, got {numel} elements")]
    NonScalarLoss { numel: usize },

    #[error("backward already ran on this graph")]
    BackwardTwice,

    #[error("leaf name {name:?} inserted twice")]
    DuplicateLeaf { name: String },
}

//! Dense tensors and a reverse-mode differentiable graph over a small,
//! fixed primitive set.

mod check;
mod graph;
mod kernels;
mod tensor;

pub use check::{finite_difference_check, finite_difference_check_leaves, FdReport};
pub use graph::{bind_named, Bindings, Graph, LeafId, NodeId, Values};
pub use tensor::{Element, Tensor};

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum NumericsError {
    #[error("shape mismatch in {op}: {detail}")]
    ShapeMismatch { op: String, detail: String },
    #[error("invalid shape: {0}")]
    InvalidShape(String),
    #[error("non-finite value produced by {op} (node {node})")]
    NonFinite { op: String, node: usize },
    #[error("leaf `{0}` is not bound")]
    UnboundLeaf(String),
    #[error("gradient requires a scalar root, got shape {0:?}")]
    NonScalarRoot(Vec<usize>),
    #[error("graph has no root")]
    NoRoot,
}

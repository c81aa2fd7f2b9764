//! Dense 2-D tensors with reverse-mode automatic differentiation.
//!
//! A [`Graph`] is built once per computation, evaluated with
//! [`Graph::forward`] against a set of named [`Bindings`], and differentiated
//! with [`Graph::backward`]. Every op checks its output for NaN/Inf, so a
//! numeric blow-up is reported at the first node that produces it.

mod gradcheck;
mod graph;
mod tensor;

pub use gradcheck::{finite_difference_check, relative_error, GradCheckReport};
pub use graph::{sigmoid, Axis, Bindings, Gradients, Graph, NodeId};
pub use tensor::Tensor;
pub(crate) use tensor::matmul_raw;

#[derive(Debug, thiserror::Error)]
pub enum AdError {
    #[error("shape error in {op}: {detail}")]
    Shape { op: &'static str, detail: String },
    #[error("non-finite value at index {index} in input tensor")]
    NonFiniteInput { index: usize },
    #[error("numeric instability: node {node} ({op}) produced a non-finite value")]
    NumericInstability { node: usize, op: &'static str },
    #[error("input `{0}` is not bound")]
    MissingInput(String),
    #[error("backward called before forward")]
    BackwardBeforeForward,
    #[error("graph has no nodes")]
    EmptyGraph,
    #[error("expected a scalar output, got shape {0:?}")]
    NonScalarOutput(Vec<usize>),
    #[error("{0}")]
    InvalidArgument(String),
}

//! Dense `f64` tensors and a reverse-mode autodiff graph.
//!
//! Every vector-Jacobian product is written in terms of differentiable
//! operations, so a gradient computed with `create_graph = true` can be
//! differentiated again. Inner-loop SGD steps built from such gradients stay
//! differentiable with respect to their starting point.

pub mod nn;
mod tensor;
mod var;

pub use tensor::{broadcast_shape, Tensor, PAD};
pub use var::{broadcast, grad, Var};

#[derive(Debug, thiserror::Error, Clone, PartialEq)]
pub enum TapeError {
    #[error("shape error: {0}")]
    Shape(String),
}

pub type Result<T> = std::result::Result<T, TapeError>;

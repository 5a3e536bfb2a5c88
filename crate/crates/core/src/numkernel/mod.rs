//! Minimal reverse-mode differentiation kernel.
//!
//! [`Graph`] is a tape: every recorded operation computes its forward value
//! eagerly and keeps the context its backward rule needs. A tape supports
//! exactly one [`Graph::backward`] call.

mod gradcheck;
mod graph;
mod optim;
mod tensor;

pub use gradcheck::{grad_check, GradCheckConfig, GradCheckReport};
pub use graph::{Conv2dAttrs, Gradients, Graph, NodeId, Pool2dAttrs};
pub use optim::{sgd_step, Sgd};
pub use tensor::Tensor;

use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum KernelError {
    #[error("{op}: incompatible shapes {shapes:?}")]
    ShapeMismatch {
        op: &'static str,
        shapes: Vec<Vec<usize>>,
    },
    #[error("invalid shape {0:?}")]
    InvalidShape(Vec<usize>),
    #[error("shape {shape:?} needs {} values, got {len}", shape.iter().product::<usize>())]
    LengthMismatch { shape: Vec<usize>, len: usize },
    #[error("{op}: {reason}")]
    InvalidAttr { op: &'static str, reason: String },
    #[error("backward needs a scalar loss, got shape {0:?}")]
    NonScalarLoss(Vec<usize>),
    #[error("tape already consumed by a backward pass")]
    TapeConsumed,
    #[error("node {0} does not belong to this tape")]
    UnknownNode(usize),
    #[error("no gradient for parameter {0}")]
    MissingGrad(usize),
}

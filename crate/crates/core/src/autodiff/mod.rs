//! Dense tensors with tape-based reverse-mode differentiation.
//!
//! A [`Graph`] evaluates eagerly: every op computes its value when it is
//! recorded, and [`Graph::backward`] replays the tape in reverse. Parameters
//! live in a [`ParamStore`] and are bound into a fresh graph per forward pass.

mod gradcheck;
mod graph;
mod params;
mod rng;
mod tensor;

pub use gradcheck::{grad_check, GradCheckError, GradCheckReport, GroupError, Objective};
pub use graph::{Gradients, Graph, Var};
pub use params::{Param, ParamStore};
pub use rng::SeededRng;
pub use tensor::{Float, Mask, Tensor};

use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum TensorError {
    #[error("shape {shape:?} does not hold {len} elements")]
    BadShape { shape: Vec<usize>, len: usize },
    #[error("{op}: dimension mismatch between {lhs:?} and {rhs:?} ({detail})")]
    Dimension {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
        detail: String,
    },
    #[error("{op}: query row {row} has no attendable column")]
    EmptyContext { op: &'static str, row: usize },
    #[error("index {index} out of range for {what} of size {size}")]
    OutOfRange {
        what: &'static str,
        index: usize,
        size: usize,
    },
    #[error("backward requires a scalar loss, got shape {0:?}")]
    NotScalar(Vec<usize>),
    #[error("node was not evaluated by this graph")]
    ForeignNode,
    #[error("non-finite value produced by {0}")]
    NonFinite(&'static str),
}

pub type Result<T, E = TensorError> = std::result::Result<T, E>;

/// Additive bias applied to masked attention logits before softmax.
pub const MASK_FILL: f64 = -1e9;

/// Layer-normalization epsilon.
pub const LAYER_NORM_EPS: f64 = 1e-5;

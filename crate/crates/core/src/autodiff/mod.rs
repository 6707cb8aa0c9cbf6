//! Reverse-mode automatic differentiation over dense `f64` tensors.
//!
//! A [`Graph`] records every primitive as it is evaluated. Leaves are added
//! with [`Graph::param`] (gradient wanted) or [`Graph::constant`]; tensors that
//! were never registered are added as constants on first use. Calling
//! [`Graph::backward`] on a scalar returns the gradient of every trainable
//! leaf. Only first-order gradients are supported.

mod gradcheck;
mod graph;
pub(crate) mod kernels;
mod tensor;

pub use gradcheck::{grad_check, GradCheckOptions};
pub use graph::{Gradients, Graph, LAYER_NORM_EPS, LOG_EPS, NORM_EPS};
pub use tensor::{NodeId, Tensor};

use thiserror::Error;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum AutodiffError {
    #[error("{op}: incompatible shapes {lhs:?} and {rhs:?}")]
    ShapeMismatch {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },
    #[error("{op}: expected rank {expected}, got shape {shape:?}")]
    RankMismatch {
        op: &'static str,
        expected: usize,
        shape: Vec<usize>,
    },
    #[error("{op}: range {start}..{end} out of bounds for shape {shape:?}")]
    OutOfRange {
        op: &'static str,
        start: usize,
        end: usize,
        shape: Vec<usize>,
    },
    #[error("invalid shape {shape:?}: every dimension must be positive")]
    InvalidShape { shape: Vec<usize> },
    #[error("shape {shape:?} does not match data length {len}")]
    DataLength { shape: Vec<usize>, len: usize },
    #[error("{0}: no inputs")]
    EmptyInput(&'static str),
    #[error("{0}: non-finite input")]
    NonFinite(&'static str),
    #[error("backward sink must be scalar, got shape {shape:?}")]
    NonScalarSink { shape: Vec<usize> },
    #[error("backward sink is not part of the graph")]
    UntrackedSink,
    #[error("node {0} does not belong to this graph")]
    UnknownNode(usize),
}

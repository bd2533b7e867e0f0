//! Dynamic-graph reverse-mode differentiation over dense f64 tensors.
//!
//! A [`Graph`] records every operation as it executes. [`Graph::grad`]
//! walks the tape backwards; because each backward rule is built from the
//! same graph ops, gradients can be differentiated again, which is how the
//! meta-learner obtains exact second-order terms through unrolled inner
//! loops.

mod backward;
mod check;
mod graph;
mod kernels;
mod tensor;

pub use backward::Grads;
pub use check::{check_gradient, GradCheck, REL_ERROR_FLOOR};
pub use graph::{Graph, Var};
pub use tensor::Tensor;

#[cfg(test)]
pub(crate) use graph::sigmoid;

use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum AdError {
    #[error("{op}: incompatible shapes {lhs:?} and {rhs:?}")]
    Shape {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },
    #[error("{op}: expected rank {expected}, got shape {shape:?}")]
    Rank {
        op: &'static str,
        expected: usize,
        shape: Vec<usize>,
    },
    #[error("{op}: range {start}..{} out of bounds for extent {extent}", start + len)]
    Range {
        op: &'static str,
        start: usize,
        len: usize,
        extent: usize,
    },
    #[error("shape {shape:?} does not hold {len} values")]
    DataLength { shape: Vec<usize>, len: usize },
    #[error("expected a scalar, got shape {shape:?}")]
    NotScalar { shape: Vec<usize> },
    #[error("{op}: empty input")]
    Empty { op: &'static str },
    #[error("variable belongs to a different graph")]
    ForeignVar,
    #[error("non-finite {what}")]
    NonFinite { what: &'static str },
    #[error("{0}")]
    InvalidArgument(&'static str),
}

#[cfg(test)]
mod tests;

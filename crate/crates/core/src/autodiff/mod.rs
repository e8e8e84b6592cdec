//! Reverse-mode automatic differentiation over dense `f64` tensors.
//!
//! Operations are recorded on a [`Tape`] in evaluation order; [`Tape::backward`]
//! walks the record once in reverse. Leaves created with [`Tape::param`]
//! receive gradients, leaves created with [`Tape::constant`] and anything
//! behind [`Tape::stop_gradient`] do not.

mod gradcheck;
mod params;
mod sparse;
mod tape;
mod tensor;

pub use gradcheck::{grad_check, grad_check_at, GradCheckReport};
pub use params::{Bound, ParamId, ParamStore};
pub use sparse::SparseMatrix;
pub use tape::{Gradients, Tape, Var};
pub use tensor::Tensor;

#[cfg(test)]
pub(crate) use tape::sigmoid;

#[derive(Debug, thiserror::Error, Clone, PartialEq)]
pub enum AutodiffError {
    #[error("shape mismatch in {op}: {detail}")]
    ShapeMismatch { op: &'static str, detail: String },
    #[error("non-finite value produced by {op}")]
    NonFinite { op: &'static str },
    #[error("backward needs a scalar loss, got shape {shape:?}")]
    NonScalarLoss { shape: Vec<usize> },
    #[error("non-finite gradient at node {node}")]
    NonFiniteGradient { node: usize },
    #[error("finite-difference step {0} outside [1e-7, 1e-3]")]
    InvalidStep(f64),
}

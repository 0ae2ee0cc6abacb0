//! Dense reverse-mode automatic differentiation over `f64` tensors.
//!
//! Every primitive is recorded on a [`Tape`] in execution order; `backward`
//! walks the tape once in reverse. A tape is single-threaded and owns all
//! intermediate values, so independent tapes share nothing.

mod gemm;
pub mod gradcheck;
mod tape;
mod tensor;

pub use tape::{Gradients, Tape, Var, LAYER_NORM_EPS};
pub use tensor::Tensor;

pub(crate) use tape::softmax_in_place;

use thiserror::Error;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum AutodiffError {
    #[error("{op}: shape mismatch between {lhs:?} and {rhs:?}")]
    ShapeMismatch {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },
    #[error("{op}: {reason}")]
    InvalidInput { op: &'static str, reason: String },
    #[error("{op}: non-finite value in output")]
    NumericFault { op: &'static str },
    #[error("backward root must be scalar, got shape {0:?}")]
    NonScalarRoot(Vec<usize>),
    #[error("data length {len} does not match shape {shape:?}")]
    DataLength { shape: Vec<usize>, len: usize },
}

//! Dense tensors and a tape-based reverse-mode gradient engine.
//!
//! All models in the crate (transformer, LSTM, linear baseline) and the
//! saliency probe compute gradients through [`Tape`]. Operations evaluate
//! eagerly; any non-finite value produced by an operation is an error that
//! names the operation.

mod gradcheck;
pub mod kernels;
mod params;
mod real;
mod tape;
mod tensor;

pub use gradcheck::{check_gradients, gradient_check, random_point, Coordinates, GradCheckReport};
pub use params::{Param, ParamSet};
pub use real::Real;
pub use tape::{Gradients, NodeId, Tape};
pub use tensor::Tensor;

#[derive(Debug, thiserror::Error, Clone, PartialEq)]
pub enum NumericsError {
    #[error("{op}: shape mismatch between {left:?} and {right:?}")]
    ShapeMismatch { op: &'static str, left: Vec<usize>, right: Vec<usize> },
    #[error("{op}: produced a non-finite value")]
    NonFinite { op: &'static str },
    #[error("backward requires a scalar loss, got shape {shape:?}")]
    NotScalar { shape: Vec<usize> },
    #[error("{op}: index {index} out of range (bound {bound})")]
    IndexOutOfRange { op: &'static str, index: usize, bound: usize },
    #[error("{op}: {detail}")]
    InvalidArgument { op: &'static str, detail: String },
}

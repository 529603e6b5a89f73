//! Minimal reverse-mode automatic differentiation over dense `f64` matrices.
//!
//! Operations are recorded on a [`Tape`] in evaluation order; `backward`
//! walks the tape once in reverse. Parameters live in a [`ParamStore`] that
//! also holds gradients and Adam moments. The tape never draws randomness:
//! sampling noise is passed in as constant tensors.

mod kernels;
mod store;
mod tape;
mod tensor;

pub use kernels::{huber, log_sum_exp_rows, matmul, sigmoid, softplus};
pub use store::{AdamConfig, ParamId, ParamStore};
pub use tape::{Gradients, Tape, Var};
pub use tensor::Tensor;

use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum GradError {
    #[error("{op}: incompatible shapes {shapes}")]
    Shape { op: &'static str, shapes: String },
    #[error("{op}: non-finite value in output")]
    NonFinite { op: &'static str },
    #[error("tensor data length {len} does not match shape {shape:?}")]
    DataLength { shape: Vec<usize>, len: usize },
    #[error("backward requires a scalar loss, got shape {0:?}")]
    NonScalarLoss(Vec<usize>),
    #[error("optimizer step without gradients; run backward first")]
    MissingGradients,
    #[error("duplicate parameter name `{0}`")]
    DuplicateParam(String),
    #[error("unknown parameter `{0}`")]
    UnknownParam(String),
}

pub type Result<T> = std::result::Result<T, GradError>;

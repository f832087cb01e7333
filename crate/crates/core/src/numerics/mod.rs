//! Dense `f64` tensors with tape-based reverse-mode differentiation.

mod gradcheck;
mod params;
mod tape;
mod tensor;

pub use gradcheck::{grad_check, GradCheckOptions, GradCheckReport};
pub use params::{BoundParams, ParamStore};
pub use tape::{Tape, Var, NORM_EPS};
pub use tensor::{matmul, relu, softmax, tanh_clip, Tensor};

use thiserror::Error;

#[derive(Debug, Error)]
pub enum NumericsError {
    #[error("dimension error: {0}")]
    Shape(String),
    #[error("infeasible: every entry is masked")]
    Infeasible,
    #[error("non-finite value: {0}")]
    NonFinite(String),
    #[error("unknown parameter `{0}`")]
    UnknownParam(String),
}

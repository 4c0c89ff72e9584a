//! Dense `f64` tensors and a reverse-mode differentiation tape.
//!
//! The tape registers a deliberately small set of operations: the linear
//! algebra and sampling primitives the detection pipeline needs, each with a
//! hand-written backward rule. Every rule is validated against central finite
//! differences (see [`grad_check`]).

mod check;
mod tape;
mod tensor;

pub use check::{grad_check, grad_check_values, rel_err, GradReport};
pub use tape::{Gradients, PinholeParams, Tape, Var};
pub use tensor::Tensor;

use thiserror::Error;

/// Errors raised by tensor construction and tape operations.
#[derive(Debug, Error)]
pub enum NumericsError {
    #[error("shape mismatch in {op}: {details}")]
    ShapeMismatch { op: &'static str, details: String },
    #[error("domain error in {op}: {details}")]
    Domain { op: &'static str, details: String },
    #[error("non-finite value encountered in {0}")]
    NonFinite(&'static str),
}

//! Minimal reverse-mode differentiation over dense `f64` arrays.
//!
//! A [`Tape`] records every operation in evaluation order; each node keeps
//! its forward value. [`Tape::backward`] sweeps the tape once in reverse and
//! accumulates vector-Jacobian products into leaf gradient slots.
//!
//! The binary mask threshold is a custom node ([`OpKind::SteMask`]) whose
//! forward value is exactly `{0,1}` and whose backward rule is the derivative
//! of the smooth surrogate `1 − σ(m̃)`.

mod check;
mod tape;
pub(crate) mod tensor;

pub use check::{
    analytic_gradient, check_gradient, compare_gradients, numeric_gradient, relative_error, GradCheckFailure,
    GradCheckReport, RELATIVE_FLOOR,
};
pub use tape::{hard_mask, soft_mask, Gradients, OpKind, Tape, Var};
pub use tensor::{sigmoid, Tensor};

use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum GradError {
    #[error("shape {shape:?} has a zero dimension")]
    InvalidShape { shape: Vec<usize> },
    #[error("shape {shape:?} needs {} elements, got {len}", shape.iter().product::<usize>())]
    LengthMismatch { shape: Vec<usize>, len: usize },
    #[error("{op}: non-conforming operand shapes {shapes:?}")]
    Conformance { op: &'static str, shapes: Vec<Vec<usize>> },
    #[error("{op}: expected {expected} operands, got {got}")]
    Arity { op: &'static str, expected: usize, got: usize },
    #[error("no node with index {index} on this tape")]
    UnknownVar { index: usize },
    #[error("backward needs a scalar output, got shape {shape:?}")]
    NonScalarOutput { shape: Vec<usize> },
    #[error("finite-difference step must be positive, got {step}")]
    InvalidStep { step: f64 },
    /// Failure inside a caller-built graph that is not a tape error.
    #[error("graph construction failed: {0}")]
    Build(String),
}

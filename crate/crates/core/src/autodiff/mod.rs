//! Tape-based reverse-mode differentiation over dense `f64` tensors.
//!
//! Values live on a [`Tape`]; every op appends a node holding its output and
//! whatever it needs for the reverse pass. Shapes never broadcast implicitly:
//! bias and per-row scaling have their own ops.

mod check;
mod ops;
mod params;
mod tape;
mod tensor;

pub use check::{finite_diff_check, finite_diff_report, CoordCheck, GradCheckReport, MIN_SAMPLED_COORDS};
pub use params::{merge_gradients, BufferId, ParamId, ParamStore, Parameter, RunningStats};
pub use tape::{Gradients, StatUpdate, Tape, Var};
pub use tensor::Tensor;

use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum AutodiffError {
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("index out of range: {0}")]
    Index(String),
    #[error("backward needs a scalar loss, got shape {0:?}")]
    NotScalar(Vec<usize>),
    #[error("tape already consumed or not recording")]
    TapeConsumed,
    #[error("non-finite value produced by {0}")]
    NonFiniteDetected(String),
    #[error("duplicate name {0}")]
    DuplicateName(String),
}

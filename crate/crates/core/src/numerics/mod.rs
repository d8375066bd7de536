//! Dense f64 matrices, a single-use reverse-mode tape, Adam, and
//! finite-difference gradient checking.

pub mod adam;
pub mod gradcheck;
pub mod matrix;
pub mod tape;

pub use adam::{adam_step, clip_global_norm, AdamState};
pub use gradcheck::{central_diff_check, rel_err, GradCheckReport};
pub use matrix::{argmax, softmax_slice, Matrix};
pub use tape::{NodeId, Tape};

use thiserror::Error;

#[derive(Debug, Error)]
pub enum NumericsError {
    #[error("shape mismatch in {op}: {lhs} vs {rhs}")]
    ShapeMismatch { op: &'static str, lhs: String, rhs: String },
    #[error("label {label} out of range for {classes} classes")]
    LabelOutOfRange { label: usize, classes: usize },
    #[error("backward seed must be a 1x1 scalar, got {rows}x{cols}")]
    SeedNotScalar { rows: usize, cols: usize },
    #[error("tape already consumed by a backward pass")]
    TapeConsumed,
    #[error("non-finite gradient for parameter {name}")]
    NonFiniteGradient { name: String },
}

//! Minimal reverse-mode differentiation over dense matrices.
//!
//! A [`Tape`] records every operation of a forward pass together with its
//! value. [`Tape::backward`] walks the record in reverse and returns exact
//! gradients for every node and every [`Parameter`] that was read onto the
//! tape. All values are `f64`.

mod gradcheck;
mod params;
mod tape;

pub use gradcheck::{gradient_check, relative_error, rounding_floor, REFINEMENTS, RESOLUTION, CoordinateSelection, GradCheckReport, ParamCheck};
pub use params::{ParamId, ParamStore, Parameter};
pub use tape::{sigmoid, Gradients, Tape, Var};

use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum DiffError {
    #[error("loss must be a 1x1 scalar, got {rows}x{cols}")]
    NonScalarLoss { rows: usize, cols: usize },
    #[error("non-finite value in {op} during backward pass")]
    NonFiniteValue { op: &'static str },
    #[error("shape mismatch in {op}: {lhs:?} vs {rhs:?}")]
    ShapeMismatch {
        op: &'static str,
        lhs: (usize, usize),
        rhs: (usize, usize),
    },
    #[error("parameter '{0}' already exists")]
    DuplicateParameter(String),
    #[error("unknown parameter '{0}'")]
    UnknownParameter(String),
    #[error("all label entries are masked")]
    AllMasked,
    #[error("focal loss gamma must be >= 0, got {0}")]
    NegativeGamma(f64),
}

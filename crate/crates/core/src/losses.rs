//! Masked multitask losses on raw network outputs.
//!
//! Every loss averages over the label entries that are present (mask 1);
//! missing entries contribute neither to the value nor to any gradient.

use std::fmt;
use std::str::FromStr;

use thiserror::Error;

use crate::diff::{DiffError, Tape, Var};
use crate::tensor::Matrix;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum LossError {
    #[error("all label entries are masked")]
    AllMasked,
    #[error("focal loss gamma must be >= 0, got {0}")]
    NegativeGamma(f64),
    #[error("labels are {labels:?} but mask is {mask:?}")]
    MaskShape {
        labels: (usize, usize),
        mask: (usize, usize),
    },
    #[error("mask entries must be 0 or 1")]
    InvalidMask,
    #[error("unknown loss '{0}' (expected ce, focal:<gamma> or mse)")]
    UnknownLoss(String),
    #[error(transparent)]
    Diff(DiffError),
}

impl From<DiffError> for LossError {
    fn from(e: DiffError) -> Self {
        match e {
            DiffError::AllMasked => LossError::AllMasked,
            DiffError::NegativeGamma(g) => LossError::NegativeGamma(g),
            other => LossError::Diff(other),
        }
    }
}

/// Per-graph, per-task targets with a presence mask (`G × T` each).
#[derive(Debug, Clone, PartialEq)]
pub struct TaskLabels {
    y: Matrix,
    mask: Matrix,
}

impl TaskLabels {
    pub fn new(y: Matrix, mask: Matrix) -> Result<Self, LossError> {
        if y.shape() != mask.shape() {
            return Err(LossError::MaskShape {
                labels: y.shape(),
                mask: mask.shape(),
            });
        }
        if mask.data().iter().any(|&m| m != 0.0 && m != 1.0) {
            return Err(LossError::InvalidMask);
        }
        Ok(Self { y, mask })
    }

    /// Labels with every entry present.
    pub fn dense(y: Matrix) -> Self {
        let mask = Matrix::filled(y.rows(), y.cols(), 1.0);
        Self { y, mask }
    }

    pub fn y(&self) -> &Matrix {
        &self.y
    }

    pub fn mask(&self) -> &Matrix {
        &self.mask
    }

    pub fn active_count(&self) -> usize {
        self.mask.data().iter().filter(|&&m| m != 0.0).count()
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FocalLossConfig {
    pub gamma: f64,
}

impl Default for FocalLossConfig {
    fn default() -> Self {
        Self { gamma: 2.0 }
    }
}

/// Mean sigmoid cross entropy over present entries, in logit form.
pub fn cross_entropy<'a>(tape: &mut Tape<'a>, logits: Var, labels: &'a TaskLabels) -> Result<Var, LossError> {
    Ok(tape.focal_loss(logits, &labels.y, &labels.mask, 0.0)?)
}

/// Mean of `−(y(1−p)^γ log p + (1−y)p^γ log(1−p))`, `p = sigmoid(logit)`.
pub fn focal_loss<'a>(
    tape: &mut Tape<'a>,
    logits: Var,
    labels: &'a TaskLabels,
    cfg: FocalLossConfig,
) -> Result<Var, LossError> {
    if !(cfg.gamma >= 0.0) {
        return Err(LossError::NegativeGamma(cfg.gamma));
    }
    Ok(tape.focal_loss(logits, &labels.y, &labels.mask, cfg.gamma)?)
}

pub fn mse_loss<'a>(tape: &mut Tape<'a>, pred: Var, labels: &'a TaskLabels) -> Result<Var, LossError> {
    Ok(tape.mse_loss(pred, &labels.y, &labels.mask)?)
}

/// Loss selection as written on the command line: `ce`, `focal:<gamma>`, `mse`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum LossKind {
    CrossEntropy,
    Focal(FocalLossConfig),
    Mse,
}

impl LossKind {
    pub fn record<'a>(&self, tape: &mut Tape<'a>, out: Var, labels: &'a TaskLabels) -> Result<Var, LossError> {
        match self {
            LossKind::CrossEntropy => cross_entropy(tape, out, labels),
            LossKind::Focal(cfg) => focal_loss(tape, out, labels, *cfg),
            LossKind::Mse => mse_loss(tape, out, labels),
        }
    }

    pub fn is_classification(&self) -> bool {
        !matches!(self, LossKind::Mse)
    }
}

impl FromStr for LossKind {
    type Err = LossError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let s = s.trim();
        match s {
            "ce" => return Ok(LossKind::CrossEntropy),
            "mse" => return Ok(LossKind::Mse),
            "focal" => return Ok(LossKind::Focal(FocalLossConfig::default())),
            _ => {}
        }
        if let Some(g) = s.strip_prefix("focal:") {
            let gamma: f64 = g.parse().map_err(|_| LossError::UnknownLoss(s.to_string()))?;
            if !(gamma >= 0.0) {
                return Err(LossError::NegativeGamma(gamma));
            }
            return Ok(LossKind::Focal(FocalLossConfig { gamma }));
        }
        Err(LossError::UnknownLoss(s.to_string()))
    }
}

impl fmt::Display for LossKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            LossKind::CrossEntropy => write!(f, "ce"),
            LossKind::Focal(cfg) => write!(f, "focal:{}", cfg.gamma),
            LossKind::Mse => write!(f, "mse"),
        }
    }
}

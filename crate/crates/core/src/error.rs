use std::io;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

/// Errors produced anywhere in the lab.
#[derive(Debug, Error)]
pub enum Error {
    /// Operand shapes do not fit the operation.
    #[error("dimension error in {op}: {detail}")]
    Shape { op: &'static str, detail: String },
    /// A NaN or infinity surfaced at an op boundary.
    #[error("non-finite value produced by {op}")]
    NonFinite { op: &'static str },
    /// Invalid configuration, plan, or hyperparameter set.
    #[error("configuration error: {0}")]
    Config(String),
    /// Malformed manifest or image file; `row` is 1-based and counts the header.
    #[error("parse error at row {row}: {msg}")]
    Parse { row: usize, msg: String },
    #[error("checkpoint error: {0}")]
    Checkpoint(String),
    /// Split counts exceed what the manifest can supply.
    #[error("infeasible split: {0}")]
    Split(String),
    /// A metric is not defined for the given inputs (e.g. one-class AUROC).
    #[error("undefined metric: {0}")]
    Metric(String),
    #[error("training diverged at step {step}: loss is {loss}")]
    Divergence { step: usize, loss: f64 },
    /// One or more parameters failed the finite-difference comparison.
    #[error("gradient check failed for {}", .failures.join(", "))]
    GradCheck { failures: Vec<String> },
    #[error(transparent)]
    Io(#[from] io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn shape(op: &'static str, detail: impl Into<String>) -> Self {
        Error::Shape { op, detail: detail.into() }
    }

    pub(crate) fn config(msg: impl Into<String>) -> Self {
        Error::Config(msg.into())
    }

    /// True for errors caused by user input rather than by a failing run.
    pub fn is_usage(&self) -> bool {
        matches!(self, Error::Config(_) | Error::Parse { .. } | Error::Split(_) | Error::Json(_))
    }
}

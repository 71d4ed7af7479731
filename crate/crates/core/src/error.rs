use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("unknown architecture id `{0}`")]
    UnknownArch(String),

    #[error("dimension mismatch in {context}: expected {expected}, got {actual}")]
    Dimension {
        context: &'static str,
        expected: usize,
        actual: usize,
    },

    #[error("label {label} out of range for {classes} classes")]
    LabelOutOfRange { label: usize, classes: usize },

    #[error("non-finite gradient in parameter tensor {0}")]
    NonFiniteGradient(usize),

    #[error("stale forward cache: {0}")]
    StaleCache(&'static str),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("window length {window} exceeds series length {frames}")]
    WindowTooLong { window: usize, frames: usize },

    #[error("not enough subjects: {0}")]
    NotEnoughSubjects(String),

    #[error("no normalization statistics for site `{0}`")]
    MissingSiteStats(String),

    #[error("covariance could not be regularized to positive definite (ridge {0})")]
    NotPositiveDefinite(f64),

    #[error("{path}: row {row}: {message}")]
    Parse {
        path: PathBuf,
        row: usize,
        message: String,
    },

    #[error("config error: {0}")]
    Config(String),

    #[error("empty input: {0}")]
    Empty(String),

    #[error("checkpoint format error: {0}")]
    Checkpoint(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

//! Crate-wide error type.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum OplError {
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),

    #[error("parse error at {path}:{line}: {msg}")]
    Parse {
        path: String,
        line: usize,
        msg: String,
    },

    #[error("zero feature vector at example {index}")]
    ZeroFeatureVector { index: usize },

    #[error("label {label} out of range at {path}:{line}")]
    LabelOutOfRange {
        label: i64,
        path: String,
        line: usize,
    },

    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("empty dataset")]
    EmptyDataset,

    #[error("non-finite value encountered: {0}")]
    NonFinite(String),

    #[error("enumeration budget exceeded: {cells} cells > {budget}")]
    EnumerationBudget { cells: usize, budget: usize },

    #[error("kl bound requires sigma <= sigma0, got sigma={sigma} sigma0={sigma0}")]
    SigmaAbovePrior { sigma: f64, sigma0: f64 },

    #[error("degenerate second moment: lambda* undefined for V = 0")]
    DegenerateSecondMoment,
}

pub type Result<T> = std::result::Result<T, OplError>;

use thiserror::Error;

use crate::model::{TreatmentId, TrialId};

#[derive(Debug, Error)]
pub enum TateError {
    #[error("configuration error: {0}")]
    Config(String),

    #[error("invalid query: {}", .0.join("; "))]
    InvalidQuery(Vec<String>),

    #[error("invalid dataset: {}", .0.join("; "))]
    InvalidDataset(Vec<String>),

    #[error("empty cell: no observation with trial {trial} and arm {arm}")]
    EmptyCell { trial: TrialId, arm: TreatmentId },

    /// Denominator of a temporal ratio indistinguishable from zero (non-degeneracy condition).
    #[error("degenerate denominator {what}: |{value:.6}| < 2 * SE ({se:.6}); non-degeneracy requires {requirement}")]
    Degenerate {
        what: String,
        value: f64,
        se: f64,
        requirement: &'static str,
    },

    #[error("{file}:{line}: {message}")]
    Parse { file: String, line: u64, message: String },

    #[error("unsupported: {0}")]
    Unsupported(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T, E = TateError> = std::result::Result<T, E>;

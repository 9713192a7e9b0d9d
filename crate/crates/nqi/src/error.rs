//! Crate-wide error type.

use std::path::PathBuf;

/// Errors surfaced by ingestion, training, scoring, and the statistics layer.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("{path}:{line}: {reason}")]
    MalformedRecord {
        path: String,
        line: usize,
        reason: String,
    },

    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("invalid {what}: {reason}")]
    InvalidInput { what: String, reason: String },

    #[error("typing speed undefined: {reason}")]
    UndefinedTypingSpeed { reason: String },

    #[error("empty input: {what}")]
    EmptyInput { what: String },

    #[error(
        "solver stopped after {iterations} iterations with KKT violation {residual:.3e} > tol {tol:.3e}"
    )]
    Convergence {
        iterations: usize,
        residual: f64,
        tol: f64,
        /// Best iterate reached before the iteration cap.
        best: Box<crate::svr::SvrModel>,
    },

    #[error("ensemble unit {unit} failed: {source}")]
    EnsembleUnit {
        unit: usize,
        #[source]
        source: Box<Error>,
    },

    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },

    #[error("insufficient data: {reason}")]
    InsufficientData { reason: String },

    #[error("cohort has only one class: {reason}")]
    OneClassCohort { reason: String },

    #[error("subject sets overlap between folds: {subjects:?}")]
    SubjectOverlap { subjects: Vec<String> },

    #[error("scored cohorts are not comparable: {reason}")]
    CohortMismatch { reason: String },

    #[error("design matrix is rank deficient: {reason}")]
    RankDeficient { reason: String },

    #[error("degenerate parameter grid: {reason}")]
    DegenerateGrid { reason: String },

    #[error("unknown subject {subject_id} referenced by {context}")]
    UnknownSubject { subject_id: String, context: String },

    #[error("config error: {reason}")]
    Config { reason: String },
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn malformed(path: &str, line: usize, reason: impl Into<String>) -> Self {
        Error::MalformedRecord {
            path: path.to_string(),
            line,
            reason: reason.into(),
        }
    }

    pub(crate) fn invalid(what: impl Into<String>, reason: impl Into<String>) -> Self {
        Error::InvalidInput {
            what: what.into(),
            reason: reason.into(),
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;

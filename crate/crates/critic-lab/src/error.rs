//! Shared error types with the exit-code categories used by the CLI.

use std::path::Path;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum DomainError {
    #[error("{path}: parse error at line {line}: {message}")]
    Parse {
        path: String,
        line: usize,
        message: String,
    },
    #[error("invariant violation on page {page_id:?}: {rule}")]
    Invariant { page_id: String, rule: String },
    #[error("score record references unknown action ({page_id:?}, {action_id:?})")]
    UnknownAction { page_id: String, action_id: String },
    #[error("missing score for ({page_id:?}, {action_id:?})")]
    MissingScore { page_id: String, action_id: String },
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

impl DomainError {
    pub fn io(path: &Path, source: std::io::Error) -> DomainError {
        DomainError::Io {
            path: path.display().to_string(),
            source,
        }
    }
}

#[derive(Debug, Error)]
pub enum NumericError {
    #[error("temperature must be strictly positive, got {0}")]
    NonPositiveTemperature(f64),
    #[error("hinge margin must be strictly positive, got {0}")]
    NonPositiveMargin(f64),
    #[error("target must be one-hot over the score indices")]
    NotOneHot,
    #[error("non-finite input: {0}")]
    NonFiniteInput(String),
    #[error("input length {got} does not match encoder input_dim {expected}")]
    DimMismatch { expected: usize, got: usize },
    #[error("degenerate embedding: pre-normalization norm {0:e} below 1e-12")]
    DegenerateEmbedding(f64),
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),
}

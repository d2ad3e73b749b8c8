//! Crate-wide error type.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch in {op}: left shape {left:?}, right shape {right:?}")]
    DimensionMismatch {
        op: String,
        left: Vec<usize>,
        right: Vec<usize>,
    },

    #[error("non-finite value {value} at flat index {index} in {context}")]
    NonFinite {
        context: String,
        index: usize,
        value: f64,
    },

    #[error("non-finite gradient for parameter {name}")]
    NonFiniteGradient { name: String },

    #[error("scenario parse error: {0}")]
    Parse(String),

    #[error("scenario schema version mismatch: expected {expected}, found {found}")]
    SchemaVersion { expected: u32, found: u32 },

    #[error("scenario invariant violated: {0}")]
    Invariant(String),

    #[error("graph construction error: {0}")]
    Graph(String),

    #[error("refinement contract violated: {0}")]
    RefinementContract(String),

    #[error("configuration error: {0}")]
    Config(String),

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error("evaluation error: {0}")]
    Eval(String),

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

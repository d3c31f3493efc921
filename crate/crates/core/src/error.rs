//! Crate-wide error type.

use thiserror::Error;

/// Errors raised anywhere in the toolkit.
#[derive(Debug, Error)]
pub enum Error {
    /// Operand shapes do not conform for the named operation.
    #[error("{op}: shape mismatch, left {left:?} vs right {right:?}")]
    ShapeMismatch {
        op: &'static str,
        left: Vec<usize>,
        right: Vec<usize>,
    },

    /// Non-finite value fed into a numeric operation.
    #[error("{op}: non-finite input value")]
    NonFinite { op: &'static str },

    /// A caller violated an operation precondition.
    #[error("contract violation: {0}")]
    Contract(String),

    /// A configuration field failed validation.
    #[error("invalid field `{field}`: {message}")]
    Validation { field: &'static str, message: String },

    /// A spectrum is not Hermitian-symmetric within tolerance.
    #[error("spectrum not Hermitian: imaginary residue {residual:e} exceeds 1e-9")]
    Symmetry { residual: f64 },

    /// Malformed input file content.
    #[error("parse error at line {line}: {message}")]
    Parse { line: usize, message: String },

    /// File content is syntactically valid but violates the schema.
    #[error("schema error: {0}")]
    Schema(String),

    /// Training diverged (NaN loss).
    #[error("training diverged at epoch {epoch}")]
    Training { epoch: usize },

    /// Trigger optimization diverged.
    #[error("trigger optimization diverged, last finite loss {last_loss}")]
    Optimization { last_loss: f64 },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    /// A pipeline stage failed; carries the stage name and config hash.
    #[error("stage `{stage}` failed (config {config_hash}): {source}")]
    Stage {
        stage: String,
        config_hash: String,
        #[source]
        source: Box<Error>,
    },
}

impl Error {
    pub fn contract(msg: impl Into<String>) -> Self {
        Error::Contract(msg.into())
    }

    pub fn in_stage(self, stage: &str, config_hash: &str) -> Self {
        Error::Stage {
            stage: stage.to_string(),
            config_hash: config_hash.to_string(),
            source: Box::new(self),
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;

//! Crate-wide error type. Every fallible operation in the library returns
//! [`Result`]; binaries decide how to surface the variants.

use thiserror::Error;

/// Errors produced anywhere in the calibration pipeline.
#[derive(Debug, Error)]
pub enum DepError {
    /// A value or argument violated a documented invariant.
    #[error("invalid {what}: {detail}")]
    Invalid { what: &'static str, detail: String },

    /// A lexicon text file failed to parse. Lines are 1-based.
    #[error("lexicon parse error at line {line}: {detail}")]
    LexiconParse { line: usize, detail: String },

    /// A config file or override failed to parse or validate.
    #[error("config error: {0}")]
    Config(String),

    /// A persisted artifact carries the wrong schema tag.
    #[error("schema mismatch: expected {expected}, found {found}")]
    Schema { expected: String, found: String },

    /// The model broke its contract mid-decode (shape or consistency).
    #[error("model contract violated at step {step}: {detail}")]
    Contract { step: usize, detail: String },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl DepError {
    pub(crate) fn invalid(what: &'static str, detail: impl Into<String>) -> Self {
        DepError::Invalid {
            what,
            detail: detail.into(),
        }
    }
}

pub type Result<T> = std::result::Result<T, DepError>;

//! Error type shared across the crate.
//!
//! Contract violations (shape mismatches, out-of-range indices) panic via
//! `assert!` — they are programming errors, not recoverable states. Everything
//! user-facing (bad inputs, bad configuration, I/O, parsing) flows through
//! [`CoreError`].

use std::path::PathBuf;

/// Recoverable errors surfaced to callers and the CLI.
#[derive(Debug, thiserror::Error)]
pub enum CoreError {
    /// An input value violated its documented domain (e.g. latitude 91).
    #[error("input domain: {0}")]
    InputDomain(String),

    /// A configuration is internally inconsistent or unsatisfiable.
    #[error("configuration: {0}")]
    Config(String),

    /// A manifest or config file failed to parse.
    #[error("parse error at {path}:{line}: {message}")]
    Parse {
        path: PathBuf,
        line: usize,
        message: String,
    },

    /// Training aborted on a non-finite loss.
    #[error("non-finite loss at step {step}; offending batch ids: {batch_ids:?}")]
    NonFiniteLoss { step: usize, batch_ids: Vec<String> },

    #[error("io: {0}")]
    Io(#[from] std::io::Error),

    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
}

/// Crate-wide result alias.
pub type Result<T> = std::result::Result<T, CoreError>;

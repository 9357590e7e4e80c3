//! Crate-level error type.

use crate::diffnum::DiffError;

/// Errors surfaced by corpus handling, model assembly, training and
/// evaluation. Autodiff-level failures are wrapped as [`Error::Diff`].
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error(transparent)]
    Diff(#[from] DiffError),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error("json: {0}")]
    Json(#[from] serde_json::Error),

    /// Invalid or mutually inconsistent configuration values.
    #[error("config: {0}")]
    Config(String),

    /// Recognized but intentionally unimplemented variant or request.
    #[error("unsupported: {0}")]
    Unsupported(String),

    /// Malformed input file; keeps the offending location.
    #[error("{path}:{line}: {msg}")]
    Parse {
        path: String,
        line: usize,
        msg: String,
    },

    /// Semantically invalid corpus contents (ordering, intervals, splits).
    #[error("data: {0}")]
    Data(String),

    /// Checkpoint or tensor-container problems (missing tensor, bad shape,
    /// truncated file).
    #[error("checkpoint: {0}")]
    Checkpoint(String),

    /// Metric undefined for the given inputs.
    #[error("metric: {0}")]
    Metric(String),

    /// Training aborted; `step` is the optimizer step that failed.
    #[error("training aborted at step {step}: {msg}")]
    Train { step: usize, msg: String },

    /// Sequence or horizon limits exceeded.
    #[error("length: {0}")]
    Length(String),
}

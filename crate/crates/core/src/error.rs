use std::path::PathBuf;

use thiserror::Error;

/// Errors produced anywhere in the engine.
///
/// The CLI maps these onto process exit codes, so variants are grouped by
/// what went wrong (bad input, bad data, numerical failure) rather than by
/// module.
#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch in {op}: expected {expected}, got {got}")]
    DimensionMismatch {
        op: &'static str,
        expected: usize,
        got: usize,
    },

    #[error("contract violation: {0}")]
    Contract(String),

    #[error("weight file {path}: {msg}")]
    Header { path: PathBuf, msg: String },

    #[error("missing tensor `{0}`")]
    MissingTensor(String),

    #[error("tensor `{name}` has shape {got:?}, expected {expected:?}")]
    ShapeMismatch {
        name: String,
        expected: Vec<usize>,
        got: Vec<usize>,
    },

    #[error("tensor `{name}` has dtype {dtype}, only F32 is supported")]
    Dtype { name: String, dtype: String },

    #[error("invalid model config: {0}")]
    Config(String),

    #[error("KV cache overflow: {needed} positions needed, max_seq_len is {max}")]
    CacheOverflow { needed: usize, max: usize },

    #[error("CETT undefined: FFN output norm is zero")]
    UndefinedCett,

    #[error("degenerate calibration: {0}")]
    DegenerateCalibration(String),

    #[error("training diverged at step {step} (loss = {loss})")]
    Divergence { step: usize, loss: f64 },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

impl Error {
    pub(crate) fn contract(msg: impl Into<String>) -> Self {
        Error::Contract(msg.into())
    }
}

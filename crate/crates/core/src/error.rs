//! Crate-wide error type.

use std::path::PathBuf;

use thiserror::Error;

/// Errors produced by the enhancement pipeline.
#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),

    #[error("configuration error: {0}")]
    Config(String),

    #[error("singular loss weight at t={t}: {detail}")]
    SingularWeight { t: f64, detail: String },

    #[error("singularity at t={t}: {detail}")]
    Singularity { t: f64, detail: String },

    #[error("divergence at integration step {step} (t={t}): non-finite state")]
    Divergence { step: usize, t: f64 },

    #[error("evaluator '{name}' failed: {detail}")]
    Evaluator { name: String, detail: String },

    #[error("non-finite loss at step {step} (t values {t_values:?}): {components}")]
    NonFiniteLoss {
        step: u64,
        t_values: Vec<f64>,
        components: String,
    },

    #[error("corpus is empty under {root}")]
    CorpusEmpty { root: PathBuf },

    #[error("I/O error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("WAV error on {path}: {detail}")]
    Wav { path: PathBuf, detail: String },

    #[error("checkpoint error: {0}")]
    Checkpoint(String),
}

pub type Result<T> = std::result::Result<T, Error>;

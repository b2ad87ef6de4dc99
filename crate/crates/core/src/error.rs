use thiserror::Error;

/// Errors raised by the inference engine and its harness.
#[derive(Debug, Error)]
pub enum Error {
    /// Every weight vanished (or a weight was non-finite). The filter treats
    /// this as total guide collapse: it resets to uniform and records it.
    #[error("degenerate weights: {0}")]
    DegenerateWeights(String),

    #[error("dimension mismatch: expected {expected:?}, got {actual:?}")]
    DimensionMismatch {
        expected: (usize, usize),
        actual: (usize, usize),
    },

    #[error("non-finite latent value at flat index {index}")]
    NonFinite { index: usize },

    #[error("numeric divergence in {stage} at step {step} (sigma = {sigma})")]
    NumericDivergence {
        stage: &'static str,
        step: usize,
        sigma: f64,
    },

    #[error("configuration error: {0}")]
    Config(String),

    #[error("parse error: {0}")]
    Parse(String),

    #[error("i/o error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub(crate) fn config(msg: impl Into<String>) -> Self {
        Error::Config(msg.into())
    }

    pub(crate) fn parse(msg: impl Into<String>) -> Self {
        Error::Parse(msg.into())
    }

    pub(crate) fn io(path: impl AsRef<std::path::Path>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.as_ref().display().to_string(),
            source,
        }
    }

    /// True for errors that stem from user configuration rather than a
    /// failure during a run.
    pub fn is_config(&self) -> bool {
        matches!(self, Error::Config(_) | Error::Parse(_))
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

use std::path::PathBuf;

/// Errors produced anywhere in the pipeline.
///
/// Variants are grouped by what a caller can do about them: shape/contract
/// errors are programming mistakes, numeric errors mean a run diverged, and
/// data errors point at a specific file or sample.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("shape mismatch in {op}: {detail}")]
    Shape { op: &'static str, detail: String },

    #[error("non-finite value produced by {op}")]
    NonFinite { op: &'static str },

    #[error("non-finite activation in transformer layer {layer}: {source}")]
    NonFiniteLayer {
        layer: usize,
        #[source]
        source: Box<Error>,
    },

    #[error("contract violation: {0}")]
    Contract(String),

    #[error("degenerate 6D rotation: {0}")]
    DegenerateRotation(String),

    #[error("motion layout error: {0}")]
    Layout(String),

    #[error("sequence too short: need at least {need} frames, got {got}")]
    TooShort { need: usize, got: usize },

    #[error("audio too short: need {need} samples, got {got}")]
    Duration { need: usize, got: usize },

    #[error("index {index} out of range 0..={max}")]
    Index { index: usize, max: usize },

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("sampling error: {0}")]
    Sampling(String),

    #[error("alignment error in sample {sample}: {detail}")]
    Alignment { sample: String, detail: String },

    #[error("loss term {term} is not finite ({value})")]
    NonFiniteLoss { term: &'static str, value: f64 },

    #[error("format error in {path}: {detail}")]
    Format { path: PathBuf, detail: String },

    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub(crate) fn shape(op: &'static str, detail: impl Into<String>) -> Self {
        Error::Shape {
            op,
            detail: detail.into(),
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn format(path: impl Into<PathBuf>, detail: impl Into<String>) -> Self {
        Error::Format {
            path: path.into(),
            detail: detail.into(),
        }
    }

    /// True for errors caused by diverging numerics rather than bad input.
    pub fn is_numeric(&self) -> bool {
        matches!(
            self,
            Error::NonFinite { .. } | Error::NonFiniteLayer { .. } | Error::NonFiniteLoss { .. }
        )
    }

    /// True for errors that point at input data (files, samples, audio).
    pub fn is_data(&self) -> bool {
        matches!(
            self,
            Error::Io { .. }
                | Error::Format { .. }
                | Error::Alignment { .. }
                | Error::Duration { .. }
                | Error::TooShort { .. }
                | Error::Layout(_)
        )
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("non-finite value in {context}")]
    NonFinite { context: String },

    /// Raised by the trainer when a loss or gradient stops being finite.
    #[error("non-finite {what} at epoch {epoch}, batch {batch}, layer {layer}")]
    TrainingDiverged {
        what: String,
        epoch: usize,
        batch: usize,
        layer: String,
    },

    #[error("configuration error: {0}")]
    Config(String),

    #[error("schedule exhausted: epoch {current} > total {total}")]
    ScheduleExhausted { current: usize, total: usize },

    #[error("invalid format: {0}")]
    Format(String),

    #[error("image {dimension} {actual} is smaller than the required {required}")]
    ImageTooSmall {
        dimension: &'static str,
        actual: usize,
        required: usize,
    },

    #[error("dataset error: {0}")]
    Dataset(String),

    #[error("split leakage: class {class} plot {plot} appears in both train and test")]
    SplitLeakage { class: String, plot: String },

    #[error("stale context: {0}")]
    StaleContext(String),

    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    IoBare(#[from] std::io::Error),

    #[error("image decode error on {path}: {message}")]
    Image { path: PathBuf, message: String },
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// Configuration-class errors map to exit code 2 in the CLI.
    pub fn is_config(&self) -> bool {
        matches!(
            self,
            Error::Config(_) | Error::ScheduleExhausted { .. } | Error::Format(_)
        )
    }
}

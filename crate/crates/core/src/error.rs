use std::io;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    /// Shapes, counts or indices that do not line up.
    #[error("structural error: {0}")]
    Structural(String),

    /// Values outside their allowed domain (non-finite, negative, ...).
    #[error("validation error: {0}")]
    Validation(String),

    #[error("shape mismatch in {op}: {detail}")]
    Shape { op: &'static str, detail: String },

    #[error("I/O error{}: {source}", .sample.map(|i| format!(" at sample {i}")).unwrap_or_default())]
    Io {
        sample: Option<usize>,
        #[source]
        source: io::Error,
    },

    #[error("format error{}: {msg}", .sample.map(|i| format!(" at sample {i}")).unwrap_or_default())]
    Format { sample: Option<usize>, msg: String },

    #[error("config error: {0}")]
    Config(String),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    /// Training produced a non-finite loss; carries the last checkpoint whose
    /// parameters were all finite.
    #[error("training diverged at step {step}: loss {loss}")]
    Diverged {
        step: usize,
        loss: f64,
        last_good: Box<crate::train::Checkpoint>,
    },
}

impl From<io::Error> for Error {
    fn from(source: io::Error) -> Self {
        Error::Io {
            sample: None,
            source,
        }
    }
}

pub(crate) fn structural(msg: impl Into<String>) -> Error {
    Error::Structural(msg.into())
}

pub(crate) fn validation(msg: impl Into<String>) -> Error {
    Error::Validation(msg.into())
}

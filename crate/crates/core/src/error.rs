use std::path::PathBuf;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("configuration error: {0}")]
    Config(String),

    #[error("input error: {0}")]
    Input(String),

    #[error("shape mismatch in {layer}: expected {expected}, got {got:?}")]
    Shape {
        layer: &'static str,
        expected: String,
        got: Vec<usize>,
    },

    #[error("protocol error: {0}")]
    Protocol(String),

    #[error("zeroth-order estimate hit a non-finite loss on direction {direction}")]
    Estimation { direction: usize },

    #[error("partition error: {0}")]
    Partition(String),

    #[error("parse error at {location}: {message}")]
    Parse { location: String, message: String },

    #[error("i/o error on {}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// Errors caused by a bad configuration or malformed input file, as
    /// opposed to failures while running.
    pub fn is_config(&self) -> bool {
        matches!(self, Error::Config(_) | Error::Parse { .. })
    }

    /// Prefix the message with the round/client where it happened.
    pub fn in_context(self, context: impl std::fmt::Display) -> Self {
        match self {
            Error::Config(m) => Error::Config(format!("{context}: {m}")),
            Error::Input(m) => Error::Input(format!("{context}: {m}")),
            Error::Protocol(m) => Error::Protocol(format!("{context}: {m}")),
            Error::Partition(m) => Error::Partition(format!("{context}: {m}")),
            other => other,
        }
    }
}

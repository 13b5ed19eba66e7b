use std::path::PathBuf;

use thiserror::Error;

/// Errors raised across the pipeline.
#[derive(Debug, Error)]
pub enum Error {
    /// A caller broke an operation's precondition (shapes, ids, key sets).
    #[error("contract violation: {0}")]
    Contract(String),

    /// A value became NaN or infinite.
    #[error("numeric error: {0}")]
    Numeric(String),

    #[error("configuration error: {0}")]
    Config(String),

    /// Config validation failure pinned to a line of the source file.
    #[error("{path}:{line}: {message}")]
    ConfigAt { path: String, line: usize, message: String },

    #[error("missing artifact {}: run {stage} first", path.display())]
    MissingArtifact { path: PathBuf, stage: &'static str },

    #[error("stale artifact {}: {reason}; rerun {stage}", path.display())]
    StaleArtifact {
        path: PathBuf,
        reason: String,
        stage: &'static str,
    },

    #[error("malformed {what}: {message}")]
    Format { what: String, message: String },

    #[error("i/o error on {}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn format(what: impl Into<String>, message: impl Into<String>) -> Self {
        Error::Format {
            what: what.into(),
            message: message.into(),
        }
    }
}

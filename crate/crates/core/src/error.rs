use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    /// A tensor or layer received data of the wrong width.
    #[error("shape mismatch at {site}: expected {expected}, found {found}")]
    Shape {
        site: String,
        expected: String,
        found: String,
    },

    /// A precondition on the arguments of an operation was violated.
    #[error("invalid argument: {0}")]
    Usage(String),

    #[error("degenerate noise schedule: {0}")]
    Schedule(String),

    #[error("non-finite value produced in {0}")]
    NonFinite(String),

    #[error("I/O error on {}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("bad checkpoint {}: {reason}", path.display())]
    Checkpoint { path: PathBuf, reason: String },

    #[error("malformed artifact {}: {reason}", path.display())]
    Malformed { path: PathBuf, reason: String },

    #[error("config key `{key}`: {reason}")]
    Config { key: String, reason: String },

    #[error("missing artifact {}", .0.display())]
    MissingArtifact(PathBuf),

    #[error("output directory {} is locked by another run", .0.display())]
    Locked(PathBuf),

    #[error("phase `{phase}` failed: {reason}")]
    Phase { phase: String, reason: String },
}

impl Error {
    pub(crate) fn shape(
        site: impl Into<String>,
        expected: impl ToString,
        found: impl ToString,
    ) -> Self {
        Error::Shape {
            site: site.into(),
            expected: expected.to_string(),
            found: found.to_string(),
        }
    }

    pub(crate) fn usage(msg: impl Into<String>) -> Self {
        Error::Usage(msg.into())
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// True for errors caused by bad user input rather than a failed computation.
    pub fn is_usage(&self) -> bool {
        matches!(self, Error::Usage(_) | Error::Config { .. })
    }
}

use std::path::PathBuf;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("{}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{0}")]
    Format(String),
    #[error("{0}")]
    Schema(String),
    #[error("{0}")]
    Config(String),
    #[error("digest mismatch for {path}: manifest {expected}, file {actual}")]
    Digest { path: String, expected: String, actual: String },
    #[error("{0}")]
    Unsupported(String),
    #[error(transparent)]
    Core(#[from] impervia_core::Error),
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io { path: path.into(), source }
    }

    /// Short machine-readable category used in CLI error lines.
    pub fn code(&self) -> &'static str {
        match self {
            Error::Io { .. } => "io",
            Error::Format(_) => "format",
            Error::Schema(_) => "schema",
            Error::Config(_) => "config",
            Error::Digest { .. } => "digest",
            Error::Unsupported(_) => "unsupported",
            Error::Core(_) => "core",
        }
    }
}

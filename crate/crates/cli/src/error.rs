use std::path::PathBuf;

use thiserror::Error;

/// Process exit codes.
pub const EXIT_USAGE: i32 = 1;
pub const EXIT_DATA: i32 = 2;
pub const EXIT_CHECK: i32 = 3;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("{0}")]
    Usage(String),
    #[error("{path}: {message}")]
    ConfigFile { path: PathBuf, message: String },
    #[error(transparent)]
    Core(#[from] scenefill::Error),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}: {source}")]
    Json {
        path: PathBuf,
        #[source]
        source: serde_json::Error,
    },
    #[error("check failed: {0}")]
    Check(String),
}

impl CliError {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        CliError::Io { path: path.into(), source }
    }

    pub fn json(path: impl Into<PathBuf>, source: serde_json::Error) -> Self {
        CliError::Json { path: path.into(), source }
    }

    pub fn exit_code(&self) -> i32 {
        use scenefill::Error as E;
        match self {
            CliError::Usage(_) | CliError::ConfigFile { .. } => EXIT_USAGE,
            CliError::Core(E::Config(_) | E::InvalidParameter { .. }) => EXIT_USAGE,
            CliError::Core(_) | CliError::Io { .. } | CliError::Json { .. } => EXIT_DATA,
            CliError::Check(_) => EXIT_CHECK,
        }
    }
}

pub type Result<T, E = CliError> = std::result::Result<T, E>;

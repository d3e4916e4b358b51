use std::path::PathBuf;

use thiserror::Error;

/// Failures of the command-line layer, each mapped to a process exit code.
#[derive(Debug, Error)]
pub enum CliError {
    #[error("config: {0}")]
    Config(String),
    #[error("{}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{}: {detail}", path.display())]
    Format { path: PathBuf, detail: String },
    #[error("variance bound violated in {0} reports")]
    BoundViolated(usize),
    #[error(transparent)]
    Core(#[from] semidpo_core::Error),
}

pub type CliResult<T> = std::result::Result<T, CliError>;

impl CliError {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        CliError::Io {
            path: path.into(),
            source,
        }
    }

    pub fn format(path: impl Into<PathBuf>, detail: impl Into<String>) -> Self {
        CliError::Format {
            path: path.into(),
            detail: detail.into(),
        }
    }

    /// 2 config, 3 I/O or file format, 4 numeric failure or violated bound.
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) => 2,
            CliError::Io { .. } | CliError::Format { .. } => 3,
            CliError::BoundViolated(_) => 4,
            CliError::Core(e) if e.is_numeric() => 4,
            CliError::Core(_) => 2,
        }
    }
}

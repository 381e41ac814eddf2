//! Error type and exit-code mapping for the CLI.

use std::path::PathBuf;

use thiserror::Error;

/// Exit code for usage and configuration problems.
pub const EXIT_USAGE: i32 = 1;
/// Exit code for runtime and numeric failures.
pub const EXIT_RUNTIME: i32 = 2;
/// Exit code when the gradient check runs but fails its tolerance.
pub const EXIT_GRADCHECK_FAILED: i32 = 3;

#[derive(Debug, Error)]
pub enum CliError {
    /// Bad flags or an inconsistent run specification.
    #[error("usage error: {0}")]
    Usage(String),

    /// A dataset or config file failed to parse; names the file and line.
    #[error("{file}:{line}: {reason}")]
    Load {
        file: String,
        line: usize,
        reason: String,
    },

    /// A config file or derived configuration is invalid.
    #[error("config error: {0}")]
    Config(String),

    /// Filesystem problem, annotated with the path involved.
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    /// A checkpoint is structurally broken (bad version, short payload).
    #[error("checkpoint integrity: {0}")]
    Integrity(String),

    #[error(transparent)]
    Engine(#[from] gust_core::Error),

    #[error("metrics serialization: {0}")]
    Json(#[from] serde_json::Error),
}

impl CliError {
    pub fn io(path: impl Into<PathBuf>) -> impl FnOnce(std::io::Error) -> CliError {
        let path = path.into();
        move |source| CliError::Io { path, source }
    }

    /// Process exit code for this error.
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Usage(_) | CliError::Load { .. } | CliError::Config(_) => EXIT_USAGE,
            CliError::Io { .. }
            | CliError::Integrity(_)
            | CliError::Engine(_)
            | CliError::Json(_) => EXIT_RUNTIME,
        }
    }
}

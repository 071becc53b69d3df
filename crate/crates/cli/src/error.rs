use std::io;
use std::path::{Path, PathBuf};

use thiserror::Error;

use crate::stage::Stage;

/// Exit codes by failure category.
pub mod exit {
    pub const OK: i32 = 0;
    pub const INTERNAL: i32 = 1;
    pub const USAGE: i32 = 2;
    pub const VALIDATION: i32 = 3;
    pub const CHAIN: i32 = 4;
    pub const EXTERNAL: i32 = 5;
}

#[derive(Debug, Error)]
pub enum CliError {
    #[error("{0}")]
    Usage(String),
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("{stage}: {count} validation problem(s); diagnostics written to {}", .diagnostics.display())]
    Validation {
        stage: Stage,
        count: usize,
        diagnostics: PathBuf,
    },
    #[error("{stage}: {input} was produced by {upstream} under a different configuration (use --force to accept)")]
    ConfigMismatch {
        stage: Stage,
        upstream: Stage,
        input: String,
    },
    #[error("{stage}: {input} changed since {upstream} wrote it (use --force to accept)")]
    StaleInput {
        stage: Stage,
        upstream: Stage,
        input: String,
    },
    #[error("{stage}: external service failed: {message}")]
    External { stage: Stage, message: String },
    #[error("cannot access {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: io::Error,
    },
    #[error("{0}")]
    Internal(String),
}

impl CliError {
    pub fn io(path: &Path, source: io::Error) -> Self {
        CliError::Io {
            path: path.to_path_buf(),
            source,
        }
    }

    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Usage(_) | CliError::Config(_) => exit::USAGE,
            CliError::Validation { .. } => exit::VALIDATION,
            CliError::ConfigMismatch { .. } | CliError::StaleInput { .. } => exit::CHAIN,
            CliError::External { .. } => exit::EXTERNAL,
            CliError::Io { .. } | CliError::Internal(_) => exit::INTERNAL,
        }
    }
}

// SPDX-License-Identifier: MIT OR Apache-2.0

//! Errors of the std layer and their process exit codes.

use std::path::PathBuf;

pub type CliResult<T> = Result<T, CliError>;

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error(transparent)]
    Core(#[from] tars_core::Error),
    #[error("{}: {source}", path.display())]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
    /// Malformed JSON, JSONL or CSV; the message carries line and column.
    #[error("{}: {message}", path.display())]
    Parse { path: PathBuf, message: String },
    /// A container file is structurally invalid.
    #[error("{}: {message}", path.display())]
    Format { path: PathBuf, message: String },
    #[error("config error: {0}")]
    Config(String),
}

impl CliError {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        CliError::Io {
            path: path.into(),
            source,
        }
    }

    pub fn parse(path: impl Into<PathBuf>, message: impl ToString) -> Self {
        CliError::Parse {
            path: path.into(),
            message: message.to_string(),
        }
    }

    pub fn format(path: impl Into<PathBuf>, message: impl Into<String>) -> Self {
        CliError::Format {
            path: path.into(),
            message: message.into(),
        }
    }

    /// 0 success, 2 config/input, 3 refinement, 4 empty selection, 5 integrity.
    pub fn exit_code(&self) -> i32 {
        use tars_core::Error as E;
        match self {
            CliError::Core(E::Refinement { .. } | E::WeakTarget { .. }) => 3,
            CliError::Core(E::EmptySelection(_)) => 4,
            CliError::Core(E::Integrity { .. }) => 5,
            CliError::Core(E::Training { .. }) => 1,
            _ => 2,
        }
    }
}

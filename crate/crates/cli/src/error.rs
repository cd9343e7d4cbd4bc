use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("{}", match line { Some(l) => format!("config line {l}: {message}"), None => format!("config: {message}") })]
    Config { line: Option<usize>, message: String },
    #[error(transparent)]
    Core(#[from] cotrain_core::Error),
    #[error("missing checkpoint {}", .0.display())]
    MissingCheckpoint(PathBuf),
    /// Record files whose columns do not line up.
    #[error("inconsistent record schemas: {0}")]
    Schema(String),
    #[error("training aborted: {0}")]
    Aborted(String),
    #[error(transparent)]
    Csv(#[from] csv::Error),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl CliError {
    /// 2 for configuration problems, 1 for everything that fails at run time.
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config { .. } | CliError::Core(cotrain_core::Error::Config(_)) => 2,
            _ => 1,
        }
    }
}

pub type CliResult<T> = std::result::Result<T, CliError>;

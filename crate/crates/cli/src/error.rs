use std::io;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("config error in {}: {message}", path.display())]
    Config { path: PathBuf, message: String },
    #[error("{0}")]
    Usage(String),
    #[error("run failed {}: {message}", week.map_or("before week 1".to_string(), |w| format!("at week {w}")))]
    Run { week: Option<u32>, message: String },
    #[error("missing inputs: {}", .0.join(", "))]
    MissingInputs(Vec<String>),
    #[error("{}: {message}", path.display())]
    Input { path: PathBuf, message: String },
    #[error("{}: {source}", path.display())]
    Io { path: PathBuf, source: io::Error },
}

impl CliError {
    pub fn exit_code(&self) -> ExitCode {
        ExitCode::from(match self {
            CliError::Config { .. } | CliError::Usage(_) => 2,
            CliError::Run { .. } => 3,
            CliError::MissingInputs(_) => 4,
            CliError::Input { .. } | CliError::Io { .. } => 1,
        })
    }

    pub fn io(path: &Path, source: io::Error) -> Self {
        CliError::Io { path: path.to_path_buf(), source }
    }

    pub fn config(path: &Path, message: impl Into<String>) -> Self {
        CliError::Config { path: path.to_path_buf(), message: message.into() }
    }
}

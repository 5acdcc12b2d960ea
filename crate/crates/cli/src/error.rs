use std::path::Path;

use thiserror::Error;

pub type CliResult<T> = std::result::Result<T, CliError>;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("config: {0}")]
    Config(String),

    #[error("usage: {0}")]
    Usage(String),

    #[error("architecture: {0}")]
    Architecture(String),

    #[error("data: {0}")]
    Data(String),

    #[error("io: {path}: {source}")]
    Io { path: String, source: std::io::Error },

    #[error("run: {0}")]
    Core(#[from] ringflow::Error),
}

impl CliError {
    pub fn io(path: &Path, source: std::io::Error) -> Self {
        CliError::Io { path: path.display().to_string(), source }
    }

    /// Process exit status for this failure.
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) | CliError::Usage(_) => 2,
            _ => 1,
        }
    }

    /// `error: <category>: <message>` squeezed onto a single line.
    pub fn one_line(&self) -> String {
        let text = format!("error: {self}");
        text.split_whitespace().collect::<Vec<_>>().join(" ")
    }
}

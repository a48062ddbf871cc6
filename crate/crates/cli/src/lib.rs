//! Library side of the `sda` command: configuration, commands and report
//! formatting. The binary only parses arguments and prints diagnostics.

pub mod commands;
pub mod config;
pub mod report;

use std::path::PathBuf;

use serde_json::json;

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("invalid config field `{field}`: {message}")]
    Config { field: String, message: String },
    #[error(transparent)]
    Core(#[from] sda_core::Error),
    #[error("{}: {source}", path.display())]
    Io { path: PathBuf, source: std::io::Error },
    #[error("{0}")]
    Run(String),
}

impl CliError {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        CliError::Io { path: path.into(), source }
    }

    /// 2 for configuration problems, 1 for everything else.
    pub fn exit_code(&self) -> u8 {
        match self {
            CliError::Config { .. } => 2,
            _ => 1,
        }
    }

    /// One JSON object for the diagnostics stream.
    pub fn diagnostic(&self, command: &str) -> serde_json::Value {
        let (kind, field) = match self {
            CliError::Config { field, .. } => ("config", Some(field.as_str())),
            CliError::Core(_) => ("library", None),
            CliError::Io { .. } => ("io", None),
            CliError::Run(_) => ("run", None),
        };
        let message = match self {
            CliError::Config { message, .. } => message.clone(),
            other => other.to_string(),
        };
        json!({"level": "error", "command": command, "kind": kind, "field": field, "message": message})
    }
}

pub type Result<T> = std::result::Result<T, CliError>;

/// Write one diagnostics record to stderr.
pub fn emit(record: &serde_json::Value) {
    eprintln!("{record}");
}

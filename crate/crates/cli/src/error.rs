use thiserror::Error;

use duet_core::config::ConfigError;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("configuration: {0}")]
    Config(#[from] ConfigError),
    /// Bad command-line input that is not a settings file problem.
    #[error("{0}")]
    Usage(String),
    #[error("{0}")]
    Device(String),
    #[error("replay found {} violation(s)", .0.len())]
    Invariant(Vec<String>),
    #[error("{0}")]
    Failed(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) | CliError::Usage(_) => 2,
            CliError::Device(_) => 3,
            CliError::Invariant(_) => 4,
            CliError::Failed(_) => 1,
        }
    }
}

pub fn failed(e: impl std::fmt::Display) -> CliError {
    CliError::Failed(e.to_string())
}

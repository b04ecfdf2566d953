//! Library side of the `cellnas` command-line tool.

pub mod commands;
pub mod config;

use std::path::PathBuf;

use cellnas::Error;

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error(transparent)]
    Core(#[from] Error),
    #[error("non-finite loss {loss} at step {step}; state saved to {}", path.display())]
    Halted { step: u64, loss: f32, path: PathBuf },
}

impl CliError {
    /// 2 for configuration or validation errors, 3 for numeric failure and
    /// 4 for I/O.
    pub fn exit_code(&self) -> u8 {
        match self {
            CliError::Halted { .. } => 3,
            CliError::Core(e) => match e {
                Error::NonFinite { .. } => 3,
                Error::Io { .. } | Error::Csv { .. } | Error::Image { .. } => 4,
                _ => 2,
            },
        }
    }
}

use std::io;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum CliError {
    /// Bad input; the message names the offending field.
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("numerical failure: {0}")]
    Numerical(String),
    #[error("i/o error: {0}")]
    Io(#[from] io::Error),
    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),
}

pub type CliResult<T> = Result<T, CliError>;

impl CliError {
    pub fn exit_code(&self) -> u8 {
        match self {
            CliError::Config(_) => 2,
            CliError::Numerical(_) => 3,
            CliError::Io(_) | CliError::Csv(_) => 1,
        }
    }

    pub fn config(field: &str, msg: impl std::fmt::Display) -> Self {
        CliError::Config(format!("{field}: {msg}"))
    }

    /// Maps a library error raised while handling `field`.
    pub fn core(field: &str, e: stochadj::Error) -> Self {
        use stochadj::Error as E;
        match e {
            E::NonFinite { .. } | E::Tape(_) => CliError::Numerical(format!("{field}: {e}")),
            E::Io(io) => CliError::Config(format!("{field}: {io}")),
            E::Csv(c) => CliError::Config(format!("{field}: {c}")),
            E::InvalidParameter { ref name, .. } => CliError::Config(format!("{field}.{name}: {e}")),
            E::Dimension { ref what, .. } if !what.contains(' ') => CliError::Config(format!("{field}.{what}: {e}")),
            other => CliError::Config(format!("{field}: {other}")),
        }
    }
}

/// `Result` adapter that tags library errors with the field being processed.
pub trait Context<T> {
    fn field(self, field: &str) -> CliResult<T>;
}

impl<T> Context<T> for stochadj::Result<T> {
    fn field(self, field: &str) -> CliResult<T> {
        self.map_err(|e| CliError::core(field, e))
    }
}

use std::path::{Path, PathBuf};

use sassl_core::Error as CoreError;

pub type Result<T, E = CliError> = std::result::Result<T, E>;

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("config error: {0}")]
    Config(String),
    #[error("data error: {0}")]
    Data(String),
    #[error("numeric failure: {0}")]
    Numeric(String),
    #[error("{}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl CliError {
    pub fn config(msg: impl Into<String>) -> Self {
        CliError::Config(msg.into())
    }

    pub fn data(msg: impl Into<String>) -> Self {
        CliError::Data(msg.into())
    }

    pub fn io(path: impl AsRef<Path>, source: std::io::Error) -> Self {
        CliError::Io {
            path: path.as_ref().to_path_buf(),
            source,
        }
    }

    /// Process exit code: 2 config, 3 data (including file access), 4 numeric.
    pub fn exit_code(&self) -> u8 {
        match self {
            CliError::Config(_) => 2,
            CliError::Data(_) | CliError::Io { .. } => 3,
            CliError::Numeric(_) => 4,
        }
    }

    /// Wraps a core error raised while working on `context`.
    pub fn core(context: impl std::fmt::Display, e: CoreError) -> Self {
        match e {
            CoreError::NonFinite(_) => CliError::Numeric(format!("{context}: {e}")),
            _ => CliError::Data(format!("{context}: {e}")),
        }
    }
}

pub trait Context<T> {
    fn context(self, what: impl std::fmt::Display) -> Result<T>;
}

impl<T> Context<T> for std::result::Result<T, CoreError> {
    fn context(self, what: impl std::fmt::Display) -> Result<T> {
        self.map_err(|e| CliError::core(what, e))
    }
}

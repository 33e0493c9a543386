//! File formats, checkpoints and the command-line harness around
//! `sassl-core`.

pub mod checkpoint;
pub mod commands;
pub mod config;
pub mod error;
pub mod io;
pub mod report;

pub use checkpoint::Checkpoint;
pub use commands::Run;
pub use config::RunConfig;
pub use error::{CliError, Result};

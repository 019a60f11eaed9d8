//! The `duet` command-line tool.

pub mod commands;
pub mod common;
pub mod devices;
pub mod error;
pub mod replay;

pub use error::CliError;

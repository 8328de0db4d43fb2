//! Command-line front end: configuration, the subcommands as functions and
//! their file outputs.

pub mod config;
pub mod error;
pub mod images;
pub mod run;

pub use config::RunConfig;
pub use error::{CliError, Result};

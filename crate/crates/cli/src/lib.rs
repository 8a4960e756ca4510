//! The `aublend` command line and the HTTP service behind the editor.

pub mod commands;
pub mod error;
pub mod service;

pub use commands::{run, Cli};
pub use error::{CliError, CliResult};

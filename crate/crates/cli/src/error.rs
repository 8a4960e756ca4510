use std::fmt;

use aublend_core::Error;

pub const USAGE: u8 = 1;
pub const DATA: u8 = 2;
pub const RUNTIME: u8 = 3;

/// A one-line diagnostic and the process exit code that goes with it.
#[derive(Debug)]
pub struct CliError {
    pub code: u8,
    pub message: String,
}

impl CliError {
    pub fn usage(message: impl Into<String>) -> Self {
        Self {
            code: USAGE,
            message: message.into(),
        }
    }

    pub fn data(message: impl Into<String>) -> Self {
        Self {
            code: DATA,
            message: message.into(),
        }
    }

    pub fn runtime(message: impl Into<String>) -> Self {
        Self {
            code: RUNTIME,
            message: message.into(),
        }
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.message)
    }
}

impl std::error::Error for CliError {}

impl From<Error> for CliError {
    fn from(e: Error) -> Self {
        let code = match e {
            Error::Config(_) => USAGE,
            Error::Validation(_)
            | Error::Format { .. }
            | Error::Io { .. }
            | Error::Shape(_)
            | Error::UnknownEmotion { .. }
            | Error::Registry(_) => DATA,
            Error::Contract(_) | Error::Diverged { .. } | Error::Autodiff(_) => RUNTIME,
        };
        Self {
            code,
            message: e.to_string().replace('\n', " "),
        }
    }
}

pub type CliResult<T> = std::result::Result<T, CliError>;

//! Exit-code contract: 0 clean, 1 data warnings, 2 usage, 3 backend failure.

use std::fmt;

pub const EXIT_OK: u8 = 0;
pub const EXIT_DATA: u8 = 1;
pub const EXIT_USAGE: u8 = 2;
pub const EXIT_BACKEND: u8 = 3;

#[derive(Debug)]
pub struct CliError {
    pub code: u8,
    pub source: anyhow::Error,
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{:#}", self.source)
    }
}

pub type CliResult<T> = Result<T, CliError>;

pub fn usage(e: impl Into<anyhow::Error>) -> CliError {
    CliError {
        code: EXIT_USAGE,
        source: e.into(),
    }
}

pub fn data(e: impl Into<anyhow::Error>) -> CliError {
    CliError {
        code: EXIT_DATA,
        source: e.into(),
    }
}

pub fn backend_err(e: impl Into<anyhow::Error>) -> CliError {
    CliError {
        code: EXIT_BACKEND,
        source: e.into(),
    }
}

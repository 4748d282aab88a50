use std::fmt;

/// Failure classes with distinct exit codes.
#[derive(Debug)]
pub enum CliError {
    Config(String),
    Numeric(qtrans_core::Error),
    Io(std::io::Error),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) => 2,
            CliError::Numeric(_) => 3,
            CliError::Io(_) => 1,
        }
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CliError::Config(m) => write!(f, "config error: {m}"),
            CliError::Numeric(e) => write!(f, "numeric failure: {e}"),
            CliError::Io(e) => write!(f, "i/o error: {e}"),
        }
    }
}

impl std::error::Error for CliError {}

impl From<qtrans_core::Error> for CliError {
    fn from(e: qtrans_core::Error) -> Self {
        match e {
            qtrans_core::Error::InvalidParameter(m) => CliError::Config(m),
            qtrans_core::Error::Io(e) => CliError::Io(e),
            other => CliError::Numeric(other),
        }
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::Io(e)
    }
}

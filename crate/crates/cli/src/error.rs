use seld_core::SeldError;
use thiserror::Error;

/// Failure classes that map onto process exit codes.
#[derive(Debug, Error)]
pub enum CliError {
    /// Bad arguments or configuration (exit 1).
    #[error("usage error: {0}")]
    Usage(String),
    /// Missing, unreadable or malformed data (exit 2).
    #[error("data error: {0}")]
    Data(String),
    /// A broken internal invariant (exit 3).
    #[error("internal error: {0}")]
    Internal(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Usage(_) => 1,
            CliError::Data(_) => 2,
            CliError::Internal(_) => 3,
        }
    }
}

impl From<SeldError> for CliError {
    fn from(e: SeldError) -> Self {
        match seld_exit_code(&e) {
            1 => CliError::Usage(e.to_string()),
            3 => CliError::Internal(e.to_string()),
            _ => CliError::Data(e.to_string()),
        }
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::Data(e.to_string())
    }
}

fn seld_exit_code(e: &SeldError) -> i32 {
    match e {
        SeldError::Usage(_) => 1,
        SeldError::Dimension { .. } => 3,
        _ => 2,
    }
}

/// Exit code for an error chain: the first classified cause wins, anything
/// unclassified is treated as a data error.
pub fn exit_code(err: &anyhow::Error) -> i32 {
    for cause in err.chain() {
        if let Some(c) = cause.downcast_ref::<CliError>() {
            return c.exit_code();
        }
        if let Some(s) = cause.downcast_ref::<SeldError>() {
            return seld_exit_code(s);
        }
    }
    2
}

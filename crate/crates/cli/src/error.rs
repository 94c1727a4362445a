use std::fmt;

use moeforge::MoeError;

/// Failure of a command, carrying its process exit code.
#[derive(Debug)]
pub enum CliError {
    /// Bad arguments, configuration or input files (exit 2).
    Usage(String),
    /// Numeric or runtime failure after inputs were accepted (exit 3).
    Runtime(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Usage(_) => 2,
            CliError::Runtime(_) => 3,
        }
    }

    pub fn usage(msg: impl Into<String>) -> Self {
        CliError::Usage(msg.into())
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CliError::Usage(m) => write!(f, "error: {m}"),
            CliError::Runtime(m) => write!(f, "runtime error: {m}"),
        }
    }
}

impl std::error::Error for CliError {}

impl From<MoeError> for CliError {
    fn from(e: MoeError) -> Self {
        match e {
            MoeError::InvalidArgument(_)
            | MoeError::Config(_)
            | MoeError::ShapeMismatch(_)
            | MoeError::Format(_)
            | MoeError::Json(_) => CliError::Usage(e.to_string()),
            MoeError::NonFinite(_)
            | MoeError::ZeroVector
            | MoeError::SvdNonConvergence { .. }
            | MoeError::UnplacedExpert(_)
            | MoeError::Io(_) => CliError::Runtime(e.to_string()),
        }
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::Runtime(e.to_string())
    }
}

impl From<csv::Error> for CliError {
    fn from(e: csv::Error) -> Self {
        CliError::Runtime(e.to_string())
    }
}

impl From<serde_json::Error> for CliError {
    fn from(e: serde_json::Error) -> Self {
        CliError::Runtime(e.to_string())
    }
}

pub type CliResult<T> = std::result::Result<T, CliError>;

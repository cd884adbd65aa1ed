use std::fmt;

/// Failure classes, each with its own process exit code.
#[derive(Debug)]
pub enum CliError {
    /// Bad configuration or arguments (exit 2).
    Validation(String),
    /// An upstream artifact is missing, modified or stale (exit 3).
    Prerequisite(String),
    /// Anything that went wrong while doing the work (exit 4).
    Runtime(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Validation(_) => 2,
            CliError::Prerequisite(_) => 3,
            CliError::Runtime(_) => 4,
        }
    }

    pub fn runtime(e: impl fmt::Display) -> Self {
        CliError::Runtime(e.to_string())
    }

    pub fn validation(e: impl fmt::Display) -> Self {
        CliError::Validation(e.to_string())
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CliError::Validation(m) => write!(f, "invalid configuration: {m}"),
            CliError::Prerequisite(m) => write!(f, "missing prerequisite: {m}"),
            CliError::Runtime(m) => write!(f, "{m}"),
        }
    }
}

impl std::error::Error for CliError {}

pub type Result<T> = std::result::Result<T, CliError>;

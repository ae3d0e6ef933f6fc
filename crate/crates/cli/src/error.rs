use std::fmt;

use ddm_core::Error;

/// Failure classes, each with its own process exit code.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ErrorKind {
    Config,
    Data,
    Numerical,
}

impl ErrorKind {
    pub fn exit_code(self) -> i32 {
        match self {
            ErrorKind::Config => 2,
            ErrorKind::Data => 3,
            ErrorKind::Numerical => 4,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CliError {
    pub kind: ErrorKind,
    pub message: String,
}

impl CliError {
    pub fn config(message: impl Into<String>) -> Self {
        Self {
            kind: ErrorKind::Config,
            message: message.into(),
        }
    }

    pub fn data(message: impl Into<String>) -> Self {
        Self {
            kind: ErrorKind::Data,
            message: message.into(),
        }
    }

    pub fn exit_code(&self) -> i32 {
        self.kind.exit_code()
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let kind = match self.kind {
            ErrorKind::Config => "config error",
            ErrorKind::Data => "data error",
            ErrorKind::Numerical => "numerical error",
        };
        write!(f, "{kind}: {}", self.message)
    }
}

impl std::error::Error for CliError {}

fn kind_of(e: &Error) -> ErrorKind {
    match e {
        Error::Config(_) => ErrorKind::Config,
        Error::Parse { .. }
        | Error::Data(_)
        | Error::ModelFormat(_)
        | Error::DimensionMismatch { .. }
        | Error::Io { .. } => ErrorKind::Data,
        Error::Domain { .. } | Error::DegenerateFit { .. } | Error::SingularLayer { .. } => {
            ErrorKind::Numerical
        }
        Error::ClassTraining { source, .. } => kind_of(source),
    }
}

impl From<Error> for CliError {
    fn from(e: Error) -> Self {
        Self {
            kind: kind_of(&e),
            message: e.to_string(),
        }
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::data(e.to_string())
    }
}

pub type CliResult<T> = std::result::Result<T, CliError>;

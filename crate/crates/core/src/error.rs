use std::fmt;
use std::path::{Path, PathBuf};

/// Where a moment-matched Beta fit was attempted.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FitLocation {
    Sample,
    Dimension(usize),
    Example(usize),
}

impl fmt::Display for FitLocation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            FitLocation::Sample => write!(f, "sample"),
            FitLocation::Dimension(k) => write!(f, "latent dimension {k}"),
            FitLocation::Example(n) => write!(f, "example {n}"),
        }
    }
}

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("{function}: argument {value} is outside the domain")]
    Domain { function: &'static str, value: f64 },

    #[error("degenerate Beta fit at {location}: mean {mean}, variance {variance}")]
    DegenerateFit {
        location: FitLocation,
        mean: f64,
        variance: f64,
    },

    #[error("{what}: expected dimension {expected}, got {got}")]
    DimensionMismatch {
        what: &'static str,
        expected: usize,
        got: usize,
    },

    #[error("decoder layer {layer} is numerically singular")]
    SingularLayer { layer: usize },

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("parse error at byte {offset}: {message}")]
    Parse { offset: u64, message: String },

    #[error("invalid data: {0}")]
    Data(String),

    #[error("model file: {0}")]
    ModelFormat(String),

    #[error("training class {label}: {source}")]
    ClassTraining {
        label: i64,
        #[source]
        source: Box<Error>,
    },

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub(crate) fn domain(function: &'static str, value: f64) -> Self {
        Error::Domain { function, value }
    }

    /// Adapter for `map_err` that attaches the file involved.
    pub(crate) fn io(path: &Path) -> impl FnOnce(std::io::Error) -> Error + '_ {
        move |source| Error::Io {
            path: path.to_path_buf(),
            source,
        }
    }

    /// Relabels a degenerate fit with the location it occurred at.
    pub fn at(self, location: FitLocation) -> Self {
        match self {
            Error::DegenerateFit { mean, variance, .. } => Error::DegenerateFit {
                location,
                mean,
                variance,
            },
            other => other,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;

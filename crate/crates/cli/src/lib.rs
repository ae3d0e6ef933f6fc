//! Command-line front end for deep density models: configuration parsing,
//! the `ddm` subcommands, and their exit-code conventions.

pub mod commands;
pub mod config;
pub mod error;

pub use config::{Command, RunConfig};
pub use error::{CliError, CliResult, ErrorKind};

/// Worker cap from `DDM_THREADS`; 1 when unset.
pub fn threads_from_env() -> CliResult<usize> {
    parse_threads(std::env::var("DDM_THREADS").ok().as_deref())
}

pub fn parse_threads(value: Option<&str>) -> CliResult<usize> {
    match value {
        None => Ok(1),
        Some(v) => match v.trim().parse::<usize>() {
            Ok(n) if n >= 1 => Ok(n),
            _ => Err(CliError::config(format!(
                "DDM_THREADS must be a positive integer, got {v:?}"
            ))),
        },
    }
}

//! Command-line driver: configuration, training, evaluation, gradient checks,
//! benchmarks, visualization export and episode export.

pub mod commands;
pub mod config;
pub mod output;

pub use commands::*;
pub use config::RunConfig;

use d2st_core::Error;

/// Process exit code for a failed command.
pub fn exit_code(e: &Error) -> i32 {
    match e {
        Error::Numeric(_) => 2,
        _ => 1,
    }
}

//! Library side of the `ttpose` binary: the run configuration and the
//! subcommand workflows, plus the mapping from errors to exit codes.

pub mod commands;
pub mod config;

use ttpose_core::Error;

pub const EXIT_CONFIG: i32 = 2;
pub const EXIT_DATA: i32 = 3;
pub const EXIT_NUMERIC: i32 = 4;

/// Process exit status for a failed command.
pub fn exit_code(e: &Error) -> i32 {
    match e {
        Error::Config(_) | Error::Argument(_) => EXIT_CONFIG,
        Error::Io { .. } | Error::Format { .. } | Error::Validation(_) => EXIT_DATA,
        Error::Diverged { .. } | Error::NonFinite { .. } => EXIT_NUMERIC,
        // a shape mismatch means the model and data settings disagree
        Error::Dimension(_) | Error::State(_) => EXIT_CONFIG,
    }
}

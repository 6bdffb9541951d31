//! Driver for the `glre` binary: run configuration, output layout and subcommands.

pub mod commands;
pub mod config;

use glre::Error;

/// Process exit status for a failed command.
pub fn exit_code(err: &Error) -> u8 {
    match err {
        Error::TrainingAborted { .. } | Error::Numeric(_) => 3,
        Error::Checkpoint(_) => 4,
        Error::Harness(_) => 1,
        _ => 2,
    }
}

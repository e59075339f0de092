//! Command-line front end: run configuration, training-set filters for the
//! paired experiments, and the subcommands themselves.

pub mod commands;
pub mod config;
pub mod filters;

use dt4rec::{Error, ErrorKind};

/// Process exit status for a failed command.
pub fn exit_code(e: &Error) -> i32 {
    match e.kind() {
        ErrorKind::Config => 2,
        ErrorKind::Io => 3,
        ErrorKind::Compatibility => 4,
        ErrorKind::Numeric => 5,
        ErrorKind::Input => 1,
    }
}

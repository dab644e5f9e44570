//! Library surface of the `geoseg` command-line tool; the binary is a thin
//! argument-parsing wrapper so tests can drive the same code paths.

pub mod commands;
pub mod config;

use geoseg_core::Error;

/// Exit codes: 0 success, 2 config error, 3 data error, 4 numeric failure.
pub fn exit_code(err: &Error) -> i32 {
    match err {
        Error::Config(_) => 2,
        Error::Data(_) | Error::Io { .. } | Error::Image { .. } | Error::ShapeMismatch { .. } => 3,
        Error::Numeric(_) => 4,
    }
}

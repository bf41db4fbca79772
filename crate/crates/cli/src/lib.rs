//! Command-line harness around `sego-core`: configuration, experiment
//! drivers, reports and plots.

pub mod commands;
pub mod config;
pub mod plot;
pub mod report;

use std::fmt;

/// A problem with the user's input (config, flags, suite names). Maps to
/// exit code 2; every other error exits with 1.
#[derive(Debug)]
pub struct UsageError(pub String);

impl fmt::Display for UsageError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for UsageError {}

pub fn exit_code(err: &anyhow::Error) -> i32 {
    if err.downcast_ref::<UsageError>().is_some() {
        return 2;
    }
    match err.downcast_ref::<sego_core::SegoError>() {
        Some(sego_core::SegoError::Configuration(_)) => 2,
        _ => 1,
    }
}

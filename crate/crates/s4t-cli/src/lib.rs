//! Command implementations behind the `s4t` binary, exposed as a library
//! so integration tests can drive them in-process.

use std::fmt;

pub mod commands;
pub mod io;

/// Misuse of the tool (bad flags, bad config, missing inputs): exit code 2,
/// as opposed to runtime failures which exit 1.
#[derive(Debug)]
pub struct UsageError(pub String);

impl UsageError {
    pub fn new(msg: impl Into<String>) -> Self {
        UsageError(msg.into())
    }
}

impl fmt::Display for UsageError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.0)
    }
}

impl std::error::Error for UsageError {}

pub fn usage(msg: impl Into<String>) -> anyhow::Error {
    UsageError::new(msg).into()
}

//! Pipeline driver behind the `nxsg` binary.

pub mod config;
pub mod pipeline;
pub mod plot;

use std::fmt;

/// A bad invocation: unknown key, unparsable value or missing input.
/// The binary maps it to exit code 2.
#[derive(Debug)]
pub struct UsageError(pub String);

impl fmt::Display for UsageError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for UsageError {}

/// Exit status for an error: 2 for usage problems, 1 otherwise.
pub fn exit_code(err: &anyhow::Error) -> u8 {
    let usage = err.chain().any(|e| {
        e.downcast_ref::<UsageError>().is_some()
            || matches!(e.downcast_ref::<nxsg::Error>(), Some(nxsg::Error::Config(_)))
    });
    if usage {
        2
    } else {
        1
    }
}

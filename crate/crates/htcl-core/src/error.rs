//! Error type shared by every module in the crate.

use std::fmt;

/// Crate-wide error. The variants map onto the CLI exit codes:
/// config errors exit 2, data/parse errors exit 3, numerical contract
/// violations (including degenerate patterns) exit 4.
#[derive(Debug)]
pub enum Error {
    /// A caller violated an operation's precondition (shape mismatch,
    /// label out of range, invalid probability vector, ...).
    Contract(String),
    /// Too few samples for a statistic that needs at least two rows.
    /// Callers of per-group losses treat this as "skip the group".
    InsufficientSamples { needed: usize, got: usize },
    /// Pattern generation produced an empty domain even after a retry.
    DegeneratePattern(String),
    /// A configuration file or value could not be interpreted.
    Config(String),
    /// A data file failed to parse; `line` is 1-based and counts the
    /// header line as line 1.
    Parse { path: String, line: usize, msg: String },
    /// Underlying I/O failure while reading or writing artifacts.
    Io(String),
}

impl fmt::Display for Error {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Error::Contract(msg) => write!(f, "contract violation: {msg}"),
            Error::InsufficientSamples { needed, got } => {
                write!(f, "insufficient samples: needed {needed}, got {got}")
            }
            Error::DegeneratePattern(msg) => write!(f, "degenerate pattern: {msg}"),
            Error::Config(msg) => write!(f, "config error: {msg}"),
            Error::Parse { path, line, msg } => {
                write!(f, "parse error in {path}, line {line}: {msg}")
            }
            Error::Io(msg) => write!(f, "io error: {msg}"),
        }
    }
}

impl std::error::Error for Error {}

impl From<std::io::Error> for Error {
    fn from(e: std::io::Error) -> Self {
        Error::Io(e.to_string())
    }
}

pub type Result<T> = std::result::Result<T, Error>;

/// Exit code the CLI should use for this error.
pub fn exit_code(err: &Error) -> i32 {
    match err {
        Error::Config(_) => 2,
        Error::Parse { .. } | Error::Io(_) => 3,
        Error::Contract(_) | Error::InsufficientSamples { .. } | Error::DegeneratePattern(_) => 4,
    }
}

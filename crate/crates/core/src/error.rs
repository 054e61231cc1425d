use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("{op}: dimension mismatch, expected {expected}, found {found}")]
    Dimension {
        op: &'static str,
        expected: String,
        found: String,
    },

    #[error("{op}: empty input ({what})")]
    Empty { op: &'static str, what: &'static str },

    #[error("{context}: non-finite value")]
    NonFinite { context: String },

    #[error("invalid config `{key}`: {message}")]
    Config { key: &'static str, message: String },

    #[error("{what} label {value} out of range [0, {limit})")]
    LabelOutOfRange {
        what: &'static str,
        value: i64,
        limit: usize,
    },

    #[error("ctc: target of length {target_len} needs at least {required} frames, got {frames}")]
    InfeasibleTarget {
        target_len: usize,
        required: usize,
        frames: usize,
    },

    #[error("swfc: batch of {0} is too small, need at least 2 samples")]
    BatchTooSmall(usize),

    #[error("{path}: bad magic {found:?}, expected {expected:?}")]
    BadMagic {
        path: PathBuf,
        expected: [u8; 4],
        found: [u8; 4],
    },

    #[error("{path}: unsupported format version {found}, expected {expected}")]
    VersionMismatch {
        path: PathBuf,
        expected: u8,
        found: u8,
    },

    #[error("{path}: truncated payload, expected {expected} bytes, found {found}")]
    Truncated {
        path: PathBuf,
        expected: u64,
        found: u64,
    },

    #[error("{path}:{line}: {message}")]
    Manifest {
        path: PathBuf,
        line: usize,
        message: String,
    },

    #[error("checkpoint config hash {found:016x} does not match run config hash {expected:016x}")]
    ConfigHashMismatch { expected: u64, found: u64 },

    #[error("checkpoint parameter `{name}`: {message}")]
    ParamMismatch { name: String, message: String },

    #[error("{context}: {source}")]
    Io {
        context: String,
        #[source]
        source: std::io::Error,
    },

    #[error("{0}")]
    Format(String),

    #[error("run `{name}` (seed {seed}): {source}")]
    Run {
        name: String,
        seed: u64,
        #[source]
        source: Box<Error>,
    },
}

impl Error {
    pub(crate) fn dim(op: &'static str, expected: impl ToString, found: impl ToString) -> Self {
        Error::Dimension {
            op,
            expected: expected.to_string(),
            found: found.to_string(),
        }
    }

    pub(crate) fn config(key: &'static str, message: impl Into<String>) -> Self {
        Error::Config {
            key,
            message: message.into(),
        }
    }

    pub(crate) fn io(context: impl Into<String>, source: std::io::Error) -> Self {
        Error::Io {
            context: context.into(),
            source,
        }
    }

    /// True for errors caused by invalid user input rather than a failed run.
    pub fn is_validation(&self) -> bool {
        match self {
            Error::Config { .. }
            | Error::LabelOutOfRange { .. }
            | Error::Manifest { .. }
            | Error::ConfigHashMismatch { .. } => true,
            Error::Run { source, .. } => source.is_validation(),
            _ => false,
        }
    }
}

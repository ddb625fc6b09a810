use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    /// An argument fell outside the domain of the operation.
    #[error("domain error: {0}")]
    Domain(String),

    #[error("point is behind the camera (z = {0})")]
    BehindCamera(f64),

    #[error("shape mismatch: {0}")]
    Shape(String),

    /// The mask selected no pixels, so a mean over it is undefined.
    #[error("undefined {0}: mask selects no pixels")]
    EmptyMask(&'static str),

    #[error("laser scan has no valid rays")]
    EmptyScan,

    #[error("configuration error: {0}")]
    Config(String),

    #[error("unknown configuration key `{0}`")]
    UnknownKey(String),

    #[error("invalid value for `{key}`: {msg}")]
    InvalidValue { key: String, msg: String },

    #[error("non-finite value: {0}")]
    NonFinite(String),

    #[error("malformed {kind} data: {msg}")]
    Format { kind: &'static str, msg: String },

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub fn format(kind: &'static str, msg: impl Into<String>) -> Self {
        Error::Format { kind, msg: msg.into() }
    }

    /// Process exit code for this error (2 config, 3 I/O, 4 numeric abort).
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config(_) | Error::UnknownKey(_) | Error::InvalidValue { .. } => 2,
            Error::Io { .. } | Error::Format { .. } => 3,
            Error::NonFinite(_) => 4,
            _ => 1,
        }
    }
}

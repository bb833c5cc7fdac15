//! Crate-wide error type.

use std::fmt;

/// Errors produced anywhere in the toolkit.
#[derive(Debug)]
pub enum Error {
    /// Invalid geometry or solver configuration (bad dimensions, TX outside
    /// the section, degenerate parameter ranges, ...).
    InvalidConfig(String),
    /// Tensor shape mismatch or an operation asked for impossible dims.
    Shape(String),
    /// The propagating field became non-finite at the reported distance.
    NonFiniteField { z: f64 },
    /// A scalar was required (e.g. backward pass seeds) but the value was not.
    NonScalar(String),
    /// File does not start with the expected magic bytes.
    BadMagic { expected: &'static str, found: Vec<u8> },
    /// Recognized container but a version this build cannot read.
    UnsupportedVersion { format: &'static str, version: u32 },
    /// File ended before the declared payload was complete.
    Truncated(String),
    /// Header dimensions overflow or disagree with the payload.
    DimensionOverflow(String),
    /// Training diverged (non-finite loss) at the reported iteration.
    TrainDiverged { iter: u64 },
    /// Metric computation was impossible (all points excluded, zero variance).
    Metrics(String),
    /// JSON (de)serialization failure.
    Json(serde_json::Error),
    /// Underlying I/O failure.
    Io(std::io::Error),
}

impl fmt::Display for Error {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Error::InvalidConfig(msg) => write!(f, "invalid configuration: {msg}"),
            Error::Shape(msg) => write!(f, "shape error: {msg}"),
            Error::NonFiniteField { z } => {
                write!(f, "field became non-finite at z = {z:.3} m")
            }
            Error::NonScalar(msg) => write!(f, "expected scalar: {msg}"),
            Error::BadMagic { expected, found } => {
                write!(f, "bad magic: expected {expected:?}, found {found:02x?}")
            }
            Error::UnsupportedVersion { format, version } => {
                write!(f, "unsupported {format} version {version}")
            }
            Error::Truncated(msg) => write!(f, "truncated payload: {msg}"),
            Error::DimensionOverflow(msg) => write!(f, "dimension overflow: {msg}"),
            Error::TrainDiverged { iter } => {
                write!(f, "training loss became non-finite at iteration {iter}")
            }
            Error::Metrics(msg) => write!(f, "metrics error: {msg}"),
            Error::Json(e) => write!(f, "json error: {e}"),
            Error::Io(e) => write!(f, "io error: {e}"),
        }
    }
}

impl std::error::Error for Error {
    fn source(&self) -> Option<&(dyn std::error::Error + 'static)> {
        match self {
            Error::Json(e) => Some(e),
            Error::Io(e) => Some(e),
            _ => None,
        }
    }
}

impl From<std::io::Error> for Error {
    fn from(e: std::io::Error) -> Self {
        Error::Io(e)
    }
}

impl From<serde_json::Error> for Error {
    fn from(e: serde_json::Error) -> Self {
        Error::Json(e)
    }
}

//! Error type shared across the crate.

use std::fmt;

#[derive(Debug)]
pub enum Error {
    /// Shape mismatch in a tensor op. Carries the op name and a human-readable
    /// description of the offending shapes.
    Shape { op: &'static str, detail: String },
    /// Math domain violation (log of a non-positive value, etc).
    Domain { op: &'static str, detail: String },
    /// An API contract was violated (e.g. backward called before forward).
    Contract(String),
    /// Bad configuration (unknown variant name, zero dimension, ...).
    Config(String),
    /// Bad runtime input (empty batch, token id out of vocab, ...).
    Input(String),
    /// Dataset on disk is missing or inconsistent.
    Data(String),
    /// A serialized artifact failed to parse. `offset` is the byte position
    /// where decoding stopped making sense.
    Format { offset: u64, detail: String },
    /// A metric is undefined for the given inputs (single-class AUC, etc).
    UndefinedMetric(String),
    /// A remote service could not be reached after retries.
    Unavailable(String),
    /// A non-finite value appeared where one must not.
    Numeric(String),
    Io(std::io::Error),
}

impl fmt::Display for Error {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Error::Shape { op, detail } => write!(f, "shape error in {op}: {detail}"),
            Error::Domain { op, detail } => write!(f, "domain error in {op}: {detail}"),
            Error::Contract(msg) => write!(f, "contract violation: {msg}"),
            Error::Config(msg) => write!(f, "config error: {msg}"),
            Error::Input(msg) => write!(f, "input error: {msg}"),
            Error::Data(msg) => write!(f, "data error: {msg}"),
            Error::Format { offset, detail } => {
                write!(f, "format error at byte {offset}: {detail}")
            }
            Error::UndefinedMetric(msg) => write!(f, "metric undefined: {msg}"),
            Error::Unavailable(msg) => write!(f, "unavailable: {msg}"),
            Error::Numeric(msg) => write!(f, "numeric failure: {msg}"),
            Error::Io(e) => write!(f, "io error: {e}"),
        }
    }
}

impl std::error::Error for Error {
    fn source(&self) -> Option<&(dyn std::error::Error + 'static)> {
        match self {
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

pub type Result<T> = std::result::Result<T, Error>;

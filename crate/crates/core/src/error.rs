use alloc::string::String;
use core::fmt;

/// Errors raised by the numeric core.
#[derive(Debug, Clone, PartialEq)]
pub enum Error {
    /// Shapes or dimensions do not satisfy an operation's contract.
    Dimension(String),
    /// A configuration value is out of its valid range.
    Config(String),
    /// An operation was called outside its contract (e.g. non-scalar loss).
    Contract(String),
    /// A metric is undefined for the given inputs (e.g. MAPE on an all-zero
    /// reference).
    UndefinedMetric(String),
    /// Non-finite values reached a graph boundary or a training step.
    NonFinite(String),
}

impl fmt::Display for Error {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Error::Dimension(msg) => write!(f, "dimension error: {msg}"),
            Error::Config(msg) => write!(f, "config error: {msg}"),
            Error::Contract(msg) => write!(f, "contract error: {msg}"),
            Error::UndefinedMetric(msg) => write!(f, "undefined metric: {msg}"),
            Error::NonFinite(msg) => write!(f, "non-finite value: {msg}"),
        }
    }
}

impl core::error::Error for Error {}

pub type Result<T> = core::result::Result<T, Error>;

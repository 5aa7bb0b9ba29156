use alloc::string::String;

/// Errors raised by the model, metric and data routines.
#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum Error {
    /// Inconsistent dimensions, unsupported settings or mismatched shapes.
    #[error("configuration error: {0}")]
    Config(String),
    /// An input violates an operation's precondition.
    #[error("precondition violated: {0}")]
    Precondition(String),
    /// A non-finite value entered a computation that requires finite input.
    #[error("numerical error: {0}")]
    Numerical(String),
    /// A lookup by index or name failed.
    #[error("lookup error: {0}")]
    Lookup(String),
    /// Malformed serialized data.
    #[error("decode error: {0}")]
    Decode(String),
}

pub type Result<T> = core::result::Result<T, Error>;

macro_rules! config_err {
    ($($arg:tt)*) => { $crate::error::Error::Config(alloc::format!($($arg)*)) };
}
macro_rules! precondition_err {
    ($($arg:tt)*) => { $crate::error::Error::Precondition(alloc::format!($($arg)*)) };
}
pub(crate) use config_err;
pub(crate) use precondition_err;

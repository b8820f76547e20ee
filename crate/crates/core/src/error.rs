use thiserror::Error;

/// Failure modes shared by every module.
#[derive(Debug, Error)]
pub enum Error {
    /// Array shapes that cannot be combined.
    #[error("dimension error: {0}")]
    Dimension(String),
    /// A configuration that violates a module invariant.
    #[error("configuration error: {0}")]
    Config(String),
    /// A caller broke an operation precondition.
    #[error("contract error: {0}")]
    Contract(String),
    /// NaN/Inf where finite values are required.
    #[error("numeric error: {0}")]
    Numeric(String),
    /// Malformed or incompatible checkpoint / tensor archive.
    #[error("format error: {0}")]
    Format(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

macro_rules! dim_err {
    ($($arg:tt)*) => { $crate::error::Error::Dimension(format!($($arg)*)) };
}
macro_rules! config_err {
    ($($arg:tt)*) => { $crate::error::Error::Config(format!($($arg)*)) };
}
macro_rules! contract_err {
    ($($arg:tt)*) => { $crate::error::Error::Contract(format!($($arg)*)) };
}
pub(crate) use {config_err, contract_err, dim_err};

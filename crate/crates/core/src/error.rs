use std::io;

use thiserror::Error;

/// Errors raised anywhere in the quantization pipeline.
#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension error: {0}")]
    Dimension(String),

    #[error("invalid argument: {0}")]
    Argument(String),

    #[error("invalid state: {0}")]
    State(String),

    #[error("invalid data: {0}")]
    Data(String),

    /// The reconstruction loss became non-finite. The message carries a
    /// short snapshot of the optimizer state at the point of failure.
    #[error("optimization diverged: {0}")]
    Divergence(String),

    #[error("training diverged: {0}")]
    Training(String),

    #[error("i/o error: {0}")]
    Io(#[from] io::Error),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

macro_rules! dim_err {
    ($($arg:tt)*) => { $crate::error::Error::Dimension(format!($($arg)*)) };
}
macro_rules! arg_err {
    ($($arg:tt)*) => { $crate::error::Error::Argument(format!($($arg)*)) };
}
macro_rules! data_err {
    ($($arg:tt)*) => { $crate::error::Error::Data(format!($($arg)*)) };
}
pub(crate) use {arg_err, data_err, dim_err};

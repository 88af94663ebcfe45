use thiserror::Error;

/// Error taxonomy shared by every module.
///
/// Variants map one-to-one onto the failure classes the operations can
/// report: shape/dimension mismatches, invalid parameters, bad data,
/// invalid runtime state, I/O, file-format violations, numeric failures
/// (NaN/overflow), and configuration problems.
#[derive(Debug, Error)]
pub enum Error {
    #[error("shape error: {0}")]
    Shape(String),
    #[error("parameter error: {0}")]
    Param(String),
    #[error("data error: {0}")]
    Data(String),
    #[error("state error: {0}")]
    State(String),
    #[error("I/O error: {0}")]
    Io(#[from] std::io::Error),
    #[error("format error: {0}")]
    Format(String),
    #[error("numeric error: {0}")]
    Numeric(String),
    #[error("configuration error: {0}")]
    Config(String),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    /// Process exit code for the CLI: usage errors exit 1 elsewhere,
    /// data/format problems exit 2.
    pub fn exit_code(&self) -> i32 {
        2
    }
}

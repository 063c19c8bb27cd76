use thiserror::Error;

/// Crate-wide error type. `Config`, `Data`, `Parse`, and `Dim` indicate
/// invalid inputs; `Numeric` and `Io` indicate runtime failures.
#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("invalid data: {0}")]
    Data(String),

    #[error("parse error at line {line}: {msg}")]
    Parse { line: usize, msg: String },

    #[error("dimension mismatch: {0}")]
    Dim(String),

    #[error("numeric failure: {0}")]
    Numeric(String),

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

impl Error {
    /// True for errors caused by caller-supplied inputs (bad config, bad
    /// data, unparsable files, mismatched shapes), as opposed to runtime
    /// failures encountered mid-computation.
    pub fn is_validation(&self) -> bool {
        matches!(
            self,
            Error::Config(_) | Error::Data(_) | Error::Parse { .. } | Error::Dim(_)
        )
    }
}

pub type Result<T> = std::result::Result<T, Error>;

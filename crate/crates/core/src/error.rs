use std::fmt;

/// Crate-wide result alias.
pub type Result<T> = std::result::Result<T, Error>;

/// Error categories surfaced by every module.
///
/// The CLI maps [`Error::exit_code`] onto its process exit status:
/// configuration and usage problems exit with 1, runtime failures with 2.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    /// Inconsistent shapes, invalid extents or rejected configuration values.
    #[error("configuration error: {0}")]
    Config(String),
    /// Caller invoked an operation outside its contract.
    #[error("usage error: {0}")]
    Usage(String),
    /// A NaN or infinity appeared in a forward value or a gradient.
    #[error("numeric error: non-finite {stage} in `{op}` (tensor {tensor})")]
    NonFinite {
        op: &'static str,
        tensor: usize,
        stage: NumericStage,
    },
    /// Malformed file content.
    #[error("parse error in {file} at byte {offset}: {msg}")]
    Parse {
        file: String,
        offset: usize,
        msg: String,
    },
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum NumericStage {
    Forward,
    Gradient,
}

impl fmt::Display for NumericStage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            NumericStage::Forward => f.write_str("value"),
            NumericStage::Gradient => f.write_str("gradient"),
        }
    }
}

impl Error {
    pub fn config(msg: impl Into<String>) -> Self {
        Error::Config(msg.into())
    }

    pub fn usage(msg: impl Into<String>) -> Self {
        Error::Usage(msg.into())
    }

    /// Short machine-readable category name.
    pub fn kind(&self) -> &'static str {
        match self {
            Error::Config(_) => "config",
            Error::Usage(_) => "usage",
            Error::NonFinite { .. } => "numeric",
            Error::Parse { .. } => "parse",
            Error::Io(_) => "io",
        }
    }

    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config(_) | Error::Usage(_) => 1,
            Error::NonFinite { .. } | Error::Parse { .. } | Error::Io(_) => 2,
        }
    }
}

use std::path::PathBuf;

/// Errors produced by the library.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    /// A caller-supplied argument or tensor shape violates an operation's contract.
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    /// Training produced a NaN or infinity.
    #[error("non-finite value: {0}")]
    NonFinite(String),

    /// A file on disk does not follow the expected layout.
    #[error("malformed {what}: {detail}")]
    Format { what: &'static str, detail: String },

    /// Checkpoint tensors disagree with the configuration they claim to encode.
    #[error("checkpoint mismatch: {0}")]
    Checkpoint(String),

    /// `backward` was invoked on a layer that holds no cached forward pass.
    #[error("backward called on `{0}` without a preceding training forward pass")]
    NoCache(&'static str),

    #[error("i/o error on {}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("json: {0}")]
    Json(#[from] serde_json::Error),

    #[error("csv: {0}")]
    Csv(String),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}

macro_rules! invalid {
    ($($arg:tt)*) => {
        $crate::error::Error::InvalidArgument(format!($($arg)*))
    };
}

macro_rules! ensure {
    ($cond:expr, $($arg:tt)*) => {
        if !$cond {
            return Err($crate::error::Error::InvalidArgument(format!($($arg)*)));
        }
    };
}

pub(crate) use ensure;
pub(crate) use invalid;

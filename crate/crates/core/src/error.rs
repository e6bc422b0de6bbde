//! Error types shared across the crate.

/// Crate-wide error type. Numeric operations report structured shape errors
/// naming the offending axis so pipeline failures are diagnosable from logs.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("shape mismatch on axis {axis} in {op}: expected {expected}, got {actual}")]
    ShapeMismatch {
        op: &'static str,
        axis: usize,
        expected: usize,
        actual: usize,
    },

    #[error("{op}: {msg}")]
    InvalidArgument { op: &'static str, msg: String },

    #[error("non-finite value produced by {op}")]
    NonFinite { op: &'static str },

    #[error("singular system in {op} (condition estimate {cond:.3e})")]
    Singular { op: &'static str, cond: f64 },

    #[error("config error: {0}")]
    Config(String),

    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub fn invalid(op: &'static str, msg: impl Into<String>) -> Self {
        Error::InvalidArgument {
            op,
            msg: msg.into(),
        }
    }

    /// Process exit code for the CLI: 2 config, 3 numeric, 4 i/o.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config(_) => 2,
            Error::Io(_) | Error::Json(_) => 4,
            _ => 3,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;

use thiserror::Error;

/// Errors surfaced by the library.
#[derive(Debug, Error)]
pub enum HypeError {
    /// Tensor shape disagreement; carries both offending shapes.
    #[error("dimension mismatch: {op} got shapes {lhs:?} and {rhs:?}")]
    Dimension {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },

    /// Caller violated an API contract (e.g. backward on a non-scalar).
    #[error("usage error: {0}")]
    Usage(String),

    /// Bad input data (out-of-range label, overlong sequence, ...).
    #[error("input error: {0}")]
    Input(String),

    /// Malformed dataset record.
    #[error("parse error at line {line}: {msg}")]
    Parse { line: usize, msg: String },

    /// Checkpoint or report file is corrupt or has the wrong version.
    #[error("format error: {0}")]
    Format(String),

    /// Configuration file problem; detected before any compute.
    #[error("config error: {0}")]
    Config(String),

    /// A computation produced non-finite values and cannot continue.
    #[error("numeric failure: {0}")]
    Numeric(String),

    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
}

impl HypeError {
    /// Process exit code: 2 for config/usage problems, 3 for run
    /// failures, 4 for i/o failures.
    pub fn exit_code(&self) -> i32 {
        match self {
            HypeError::Config(_) | HypeError::Usage(_) => 2,
            HypeError::Input(_)
            | HypeError::Parse { .. }
            | HypeError::Format(_)
            | HypeError::Dimension { .. }
            | HypeError::Numeric(_) => 3,
            HypeError::Io(_) => 4,
        }
    }
}

pub type Result<T> = std::result::Result<T, HypeError>;

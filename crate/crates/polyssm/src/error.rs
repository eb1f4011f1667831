//! Crate-wide error type and exit-code mapping.

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("{op}: shape mismatch between {lhs:?} and {rhs:?}")]
    ShapeMismatch {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },

    #[error("{op}: {msg}")]
    InvalidArgument { op: &'static str, msg: String },

    #[error("{op}: domain error: {msg}")]
    Domain { op: &'static str, msg: String },

    /// NaN/Inf surfaced by a public operation. Never propagates silently.
    #[error("{op}: produced non-finite values ({detail})")]
    NonFinite { op: &'static str, detail: String },

    #[error("data error: {0}")]
    Data(String),

    #[error("config error: {0}")]
    Config(String),

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

impl Error {
    pub fn invalid(op: &'static str, msg: impl Into<String>) -> Self {
        Error::InvalidArgument {
            op,
            msg: msg.into(),
        }
    }

    pub fn domain(op: &'static str, msg: impl Into<String>) -> Self {
        Error::Domain {
            op,
            msg: msg.into(),
        }
    }

    pub fn non_finite(op: &'static str, detail: impl Into<String>) -> Self {
        Error::NonFinite {
            op,
            detail: detail.into(),
        }
    }

    pub fn shape(op: &'static str, lhs: &[usize], rhs: &[usize]) -> Self {
        Error::ShapeMismatch {
            op,
            lhs: lhs.to_vec(),
            rhs: rhs.to_vec(),
        }
    }

    pub fn data(msg: impl Into<String>) -> Self {
        Error::Data(msg.into())
    }

    pub fn data_at(row: usize, msg: impl Into<String>) -> Self {
        Error::Data(format!("row {row}: {}", msg.into()))
    }

    /// Process exit code for the CLI: 2 for data/config/io problems, 3 for
    /// numeric failures. Usage errors (exit 1) are handled by the parser.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Data(_) | Error::Config(_) | Error::Io(_) => 2,
            _ => 3,
        }
    }
}

use std::path::PathBuf;

/// Errors raised anywhere in the pipeline.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    /// A tensor operand had the wrong extent along one axis.
    #[error("{op}: contract violation on operand `{operand}` axis {axis}: expected {expected}, found {found}")]
    Shape {
        op: &'static str,
        operand: &'static str,
        axis: &'static str,
        expected: usize,
        found: usize,
    },
    /// Any other violated precondition.
    #[error("{op}: contract violation: {detail}")]
    Contract { op: &'static str, detail: String },
    /// Malformed binary file.
    #[error("failed to parse {what} at byte offset {offset}: {detail}")]
    Parse {
        what: &'static str,
        offset: u64,
        detail: String,
    },
    /// Structurally valid input with invalid content (bad label rings, bad config values).
    #[error("invalid {what}: {detail}")]
    Invalid { what: &'static str, detail: String },
    /// NaN or infinity showed up in a loss or gradient.
    #[error("non-finite value in {what}: {detail}")]
    NonFinite { what: String, detail: String },
    #[error("{}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn contract(op: &'static str, detail: impl Into<String>) -> Self {
        Error::Contract {
            op,
            detail: detail.into(),
        }
    }

    pub(crate) fn invalid(what: &'static str, detail: impl Into<String>) -> Self {
        Error::Invalid {
            what,
            detail: detail.into(),
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// Coarse classification used for process exit codes.
    pub fn kind(&self) -> ErrorKind {
        match self {
            Error::Shape { .. } | Error::Contract { .. } => ErrorKind::Contract,
            Error::NonFinite { .. } => ErrorKind::Numeric,
            Error::Parse { .. } | Error::Invalid { .. } | Error::Io { .. } | Error::Json(_) => {
                ErrorKind::Data
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ErrorKind {
    Contract,
    Data,
    Numeric,
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

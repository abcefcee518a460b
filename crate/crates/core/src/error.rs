use std::io;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("shape mismatch in {op}: {left} vs {right}")]
    Shape {
        op: &'static str,
        left: String,
        right: String,
    },

    #[error("invalid argument: {0}")]
    Argument(String),

    #[error("degenerate batch of size {0}: contrastive loss needs at least 2 pairs")]
    DegenerateBatch(usize),

    #[error("insufficient data for {what}: required {required}, available {available}")]
    Size {
        what: String,
        required: usize,
        available: usize,
    },

    #[error("format error: {0}")]
    Format(String),

    #[error("unsupported format version {found} (expected {expected})")]
    UnsupportedVersion { found: u32, expected: u32 },

    #[error("integrity error in record {id:?}: {reason}")]
    Integrity { id: String, reason: String },

    #[error("io error: {0}")]
    Io(#[from] io::Error),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),

    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),
}

impl Error {
    /// Stable short name for machine-readable error lines.
    pub fn kind(&self) -> &'static str {
        match self {
            Error::Shape { .. } => "shape",
            Error::Argument(_) => "argument",
            Error::DegenerateBatch(_) => "degenerate_batch",
            Error::Size { .. } => "size",
            Error::Format(_) => "format",
            Error::UnsupportedVersion { .. } => "unsupported_version",
            Error::Integrity { .. } => "integrity",
            Error::Io(_) => "io",
            Error::Json(_) => "json",
            Error::Csv(_) => "csv",
        }
    }

    pub(crate) fn shape(op: &'static str, left: (usize, usize), right: (usize, usize)) -> Self {
        Error::Shape {
            op,
            left: format!("{}x{}", left.0, left.1),
            right: format!("{}x{}", right.0, right.1),
        }
    }

    pub(crate) fn size(what: impl Into<String>, required: usize, available: usize) -> Self {
        Error::Size {
            what: what.into(),
            required,
            available,
        }
    }
}

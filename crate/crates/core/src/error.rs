use thiserror::Error;

/// Errors raised anywhere in the pipeline.
///
/// Variants are grouped by the process exit code the CLI maps them to:
/// contract violations (1), I/O and file-format problems (2) and failed
/// verification suites (3).
#[derive(Debug, Error)]
pub enum Error {
    #[error("contract violation: {0}")]
    Contract(String),

    #[error("non-finite value produced by {op}")]
    NonFinite { op: &'static str },

    #[error("domain error in {op}: {detail}")]
    Domain { op: &'static str, detail: String },

    #[error("singular 1x1x1 convolution weight at {site} (|det| = {det:e})")]
    Singular { site: String, det: f64 },

    #[error("training diverged: {0}")]
    Diverged(String),

    #[error("bad magic: expected {expected:?}, found {found:?}")]
    BadMagic { expected: String, found: String },

    #[error("unsupported format version {0}")]
    Version(u32),

    #[error("truncated input: needed {needed} bytes, found {found}")]
    Truncated { needed: usize, found: usize },

    #[error("dimension overflow: {0}")]
    DimOverflow(String),

    #[error("malformed input: {0}")]
    Format(String),

    #[error("verification failed: {0}")]
    Verification(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

impl Error {
    /// Process exit code: 1 contract, 2 I/O or format, 3 verification.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Contract(_)
            | Error::NonFinite { .. }
            | Error::Domain { .. }
            | Error::Singular { .. }
            | Error::Diverged(_) => 1,
            Error::BadMagic { .. }
            | Error::Version(_)
            | Error::Truncated { .. }
            | Error::DimOverflow(_)
            | Error::Format(_)
            | Error::Io(_)
            | Error::Csv(_)
            | Error::Json(_) => 2,
            Error::Verification(_) => 3,
        }
    }
}

pub(crate) fn contract(msg: impl Into<String>) -> Error {
    Error::Contract(msg.into())
}

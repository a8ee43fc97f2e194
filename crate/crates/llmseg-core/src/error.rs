//! Crate-wide error type.

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    // ---- prompt / subclass generation ----
    #[error("class name is empty")]
    EmptyClassName,
    #[error("subclass count must be at least 1")]
    ZeroSubclasses,
    #[error(
        "generation incomplete: wanted {wanted} distinct subclasses, got {}: {partial:?}",
        partial.len()
    )]
    GenerationIncomplete { wanted: usize, partial: Vec<String> },
    #[error("invalid subclass set: {0}")]
    InvalidSubclassSet(String),
    #[error("template {id:?} must contain exactly one {{}} placeholder, found {found}")]
    MalformedTemplate { id: String, found: usize },
    #[error("unknown template id {0:?}")]
    UnknownTemplate(String),

    // ---- remote services ----
    #[error("endpoint not configured: set {0}")]
    EndpointNotConfigured(&'static str),
    #[error("transport failure talking to {context}: {message}")]
    Transport { context: String, message: String },
    #[error("malformed service response: {0}")]
    MalformedResponse(String),

    // ---- tensor files ----
    #[error("tensor file has bad magic (expected \"LSEG\")")]
    BadMagic,
    #[error("tensor file version {0} is not supported (expected 1)")]
    UnsupportedVersion(u32),
    #[error("tensor file dtype {0:?} is not supported (expected \"f32le\")")]
    UnsupportedDtype(String),
    #[error("tensor file header is {0} bytes, limit is 65536")]
    HeaderTooLarge(usize),
    #[error("tensor payload length mismatch: header implies {expected} bytes, found {found}")]
    PayloadLengthMismatch { expected: usize, found: usize },
    #[error("non-finite value at flat index {0}")]
    NonFinite(usize),

    // ---- shapes and parameters ----
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("invalid parameter: {0}")]
    InvalidParam(String),
    #[error("degenerate descriptor: {0}")]
    DegenerateDescriptor(String),

    // ---- datasets, images, configuration ----
    #[error("dataset error: {0}")]
    Dataset(String),
    #[error("image error: {0}")]
    Image(String),
    #[error("config error: {0}")]
    Config(String),

    // ---- passthrough ----
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    /// Whether the error is a caller mistake (bad flags, malformed config,
    /// unknown class names) rather than a runtime failure. The CLI maps
    /// these to exit code 2.
    pub fn is_config(&self) -> bool {
        matches!(
            self,
            Error::Config(_)
                | Error::InvalidParam(_)
                | Error::EmptyClassName
                | Error::ZeroSubclasses
                | Error::MalformedTemplate { .. }
                | Error::UnknownTemplate(_)
                | Error::EndpointNotConfigured(_)
        )
    }
}

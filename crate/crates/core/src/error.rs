//! Crate-wide error type.

use thiserror::Error;

/// Result alias used throughout the crate.
pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum Error {
    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("invalid key {0:?}: keys must be non-empty and must not contain '.'")]
    InvalidKey(String),

    #[error("batch shape violation at {path}: expected leading dims {expected:?}, got shape {actual:?}")]
    BatchShape { path: String, expected: Vec<usize>, actual: Vec<usize> },

    #[error("missing path {0:?}")]
    MissingPath(String),

    #[error("path {path:?} passes through leaf {leaf:?}")]
    PrefixIsLeaf { path: String, leaf: String },

    #[error("expected a {expected} at {path:?}")]
    WrongEntry { path: String, expected: &'static str },

    #[error("structure mismatch: {0}")]
    Structure(String),

    #[error("missing input key {0:?}")]
    MissingInput(String),

    #[error("cyclic topology involving module {0:?}")]
    Cycle(String),

    #[error("invalid graph: {0}")]
    Graph(String),

    #[error("unknown module kind {0:?}")]
    UnknownKind(String),

    #[error("parameter blob length mismatch for {key}: expected {expected} bytes, found {found}")]
    BlobLength { key: String, expected: usize, found: usize },

    #[error("tape already consumed")]
    TapeConsumed,

    #[error("invalid seed: {0}")]
    Seed(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("unknown site {0:?}")]
    UnknownSite(String),

    #[error("gradient slot requested at {0:?} but backward is not enabled for this run")]
    BackwardNotEnabled(String),

    #[error("model is already running")]
    AlreadyRunning,

    #[error("proxy for {site}.{slot} is still pending")]
    ProxyPending { site: String, slot: String },

    #[error("hook callback failed at {site}: {message}")]
    Callback { site: String, message: String },

    #[error("LRP: module {0:?} is not covered by any rule")]
    UncoveredModule(String),

    #[error("LRP: zero denominator at {site} unit {unit} under lrp0; use the epsilon rule")]
    ZeroDenominator { site: String, unit: usize },

    #[error("format error: {0}")]
    Format(String),

    #[error("io error: {0}")]
    Io(String),
}

impl From<std::io::Error> for Error {
    fn from(e: std::io::Error) -> Self {
        Error::Io(e.to_string())
    }
}

impl From<serde_json::Error> for Error {
    fn from(e: serde_json::Error) -> Self {
        Error::Format(e.to_string())
    }
}

use thiserror::Error;

/// Errors produced by the calibration engine.
#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch in {op}: {lhs:?} vs {rhs:?}")]
    Shape {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },

    #[error("invalid shape {shape:?}: {reason}")]
    InvalidShape { shape: Vec<usize>, reason: String },

    #[error("cannot reduce over empty axis {0}")]
    EmptyAxis(usize),

    #[error("non-finite value at flat index {0}")]
    NonFinite(usize),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("layer `{layer}`: {source}")]
    Layer {
        layer: String,
        #[source]
        source: Box<Error>,
    },

    #[error("bad magic: expected {expected:?}")]
    BadMagic { expected: &'static str },

    #[error("truncated payload: needed {needed} bytes at offset {offset}, {available} available")]
    Truncated {
        offset: usize,
        needed: usize,
        available: usize,
    },

    #[error("dimension inconsistency: {0}")]
    DimensionInconsistency(String),

    #[error("malformed data: {0}")]
    Malformed(String),

    #[error("protocol violation: {0}")]
    Protocol(String),

    #[error("checksum mismatch on {context}: expected {expected:#010x}, got {actual:#010x}")]
    Checksum {
        context: String,
        expected: u32,
        actual: u32,
    },

    #[error("calibration aborted: {0}")]
    Aborted(String),

    #[error("transport timed out after {0} ms")]
    Timeout(u64),

    #[error("ledger corruption: {0}")]
    Ledger(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    /// Stable short code, one per variant.
    pub fn code(&self) -> &'static str {
        match self {
            Error::Shape { .. } => "shape",
            Error::InvalidShape { .. } => "invalid_shape",
            Error::EmptyAxis(_) => "empty_axis",
            Error::NonFinite(_) => "non_finite",
            Error::Config(_) => "config",
            Error::Layer { source, .. } => source.code(),
            Error::BadMagic { .. } => "bad_magic",
            Error::Truncated { .. } => "truncated",
            Error::DimensionInconsistency(_) => "dimension_inconsistency",
            Error::Malformed(_) => "malformed",
            Error::Protocol(_) => "protocol",
            Error::Checksum { .. } => "checksum",
            Error::Aborted(_) => "aborted",
            Error::Timeout(_) => "timeout",
            Error::Ledger(_) => "ledger",
            Error::Io(_) => "io",
            Error::Json(_) => "json",
        }
    }

    pub(crate) fn in_layer(self, layer: &str) -> Error {
        match self {
            e @ Error::Layer { .. } => e,
            other => Error::Layer {
                layer: layer.to_string(),
                source: Box::new(other),
            },
        }
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

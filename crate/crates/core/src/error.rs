use alloc::string::String;

/// Errors raised by the numerical core and the model components built on it.
#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum Error {
    #[error("loss must be a scalar, got shape {rows}x{cols}")]
    NonScalarLoss { rows: usize, cols: usize },
    #[error("non-finite value produced by `{op}` (node {node})")]
    NonFinite { op: &'static str, node: usize },
    #[error("shape mismatch in {context}: expected {expected}, got {actual}")]
    ShapeMismatch {
        context: &'static str,
        expected: String,
        actual: String,
    },
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),
    #[error("value out of range: {0}")]
    OutOfRange(String),
    #[error("channel {channel} has zero standard deviation")]
    ZeroStd { channel: usize },
    #[error("embedding {index} has zero norm")]
    ZeroNorm { index: usize },
    #[error("head parameters are still at their initial values; train the head or allow untrained sampling")]
    UntrainedHead,
    #[error("unknown system id `{0}`")]
    UnknownSystem(String),
    #[error("not enough samples: need at least {needed}, got {got}")]
    NotEnoughSamples { needed: usize, got: usize },
    #[error("cache position mismatch: cache holds {cached} positions, step expected {expected}")]
    CacheMismatch { cached: usize, expected: usize },
}

pub type Result<T> = core::result::Result<T, Error>;

pub(crate) fn shape_err(
    context: &'static str,
    expected: impl core::fmt::Debug,
    actual: impl core::fmt::Debug,
) -> Error {
    Error::ShapeMismatch {
        context,
        expected: alloc::format!("{expected:?}"),
        actual: alloc::format!("{actual:?}"),
    }
}

use thiserror::Error;

/// Errors raised by the library.
#[derive(Debug, Error, Clone, PartialEq)]
pub enum Error {
    #[error("invalid parameter `{name}`: {reason}")]
    InvalidParameter { name: &'static str, reason: String },

    #[error("invalid angular spec: {0}")]
    InvalidAngularSpec(String),

    #[error("aperture radius {r_ap} too small for a positive auxiliary segment")]
    ApertureTooSmall { r_ap: f64 },

    #[error("cumulative macropixel probability {0} reaches 1 inside the aperture")]
    RadiusUndefined(f64),

    #[error("discard bands leave macropixel {linear} with no kept region")]
    EmptyKeptRegion { linear: usize },

    #[error("equalization failed for ring {ring}: {reason}")]
    EqualizationFailed { ring: usize, reason: String },

    #[error("sentinel label has no kept probability")]
    SentinelLabel,

    #[error("error probability {0} outside [0, 1)")]
    ErrorRateOutOfRange(f64),

    #[error("dimension must be at least 2, got {0}")]
    DimensionTooSmall(usize),

    #[error("matched-basis block {0} has no positive mass")]
    ZeroMassBlock(&'static str),

    #[error("need at least {needed} samples, got {got}")]
    InsufficientSamples { needed: usize, got: usize },

    #[error("matched pairs mix position and momentum bases")]
    MixedBases,

    #[error("segmentation not valid: {0}")]
    InvalidSegmentation(String),

    #[error("grid error: {0}")]
    Grid(String),

    #[error("every pixel was discarded")]
    AllPixelsDiscarded,

    #[error("event log: {0}")]
    EventLog(String),

    #[error("root finding did not converge: {0}")]
    NoConvergence(String),
}

pub type Result<T> = std::result::Result<T, Error>;

pub(crate) fn invalid(name: &'static str, reason: impl Into<String>) -> Error {
    Error::InvalidParameter {
        name,
        reason: reason.into(),
    }
}

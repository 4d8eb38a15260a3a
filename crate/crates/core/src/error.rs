use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid grid: `{field}` {reason}")]
    InvalidGrid { field: &'static str, reason: String },

    #[error("invalid argument `{name}`: {reason}")]
    InvalidArgument { name: &'static str, reason: String },

    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),

    #[error("format error: {0}")]
    Format(String),

    #[error("count mismatch: manifest declares {declared} rasters, file holds {present}")]
    CountMismatch { declared: usize, present: usize },

    #[error("truncated file: {0}")]
    Truncated(String),

    #[error("insufficient data: {0}")]
    InsufficientData(String),

    #[error("non-finite loss at epoch {epoch} ({region})")]
    NonFiniteLoss { epoch: usize, region: String },

    #[error("spectrally empty field")]
    SpectrallyEmpty,

    #[error("spectral bias component is degenerate (log dc power ~ 0)")]
    DegenerateBias,

    #[error("reference blur indistinguishable from base field")]
    ReferenceBlurIndistinguishable,

    #[error("time {0} outside supported range 1950-2050")]
    TimeOutOfRange(String),

    #[error("climatology has no value for day-of-year {0}")]
    MissingClimatology(u32),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    /// Short stable identifier, used by the CLI for machine-parseable diagnostics.
    pub fn kind(&self) -> &'static str {
        match self {
            Error::InvalidGrid { .. } => "invalid_grid",
            Error::InvalidArgument { .. } => "invalid_argument",
            Error::ShapeMismatch(_) => "shape_mismatch",
            Error::Format(_) => "format",
            Error::CountMismatch { .. } => "count_mismatch",
            Error::Truncated(_) => "truncated",
            Error::InsufficientData(_) => "insufficient_data",
            Error::NonFiniteLoss { .. } => "non_finite_loss",
            Error::SpectrallyEmpty => "spectrally_empty",
            Error::DegenerateBias => "degenerate_bias",
            Error::ReferenceBlurIndistinguishable => "reference_blur_indistinguishable",
            Error::TimeOutOfRange(_) => "time_out_of_range",
            Error::MissingClimatology(_) => "missing_climatology",
            Error::Io(_) => "io",
            Error::Json(_) => "json",
        }
    }

    pub(crate) fn arg(name: &'static str, reason: impl Into<String>) -> Self {
        Error::InvalidArgument { name, reason: reason.into() }
    }
}

pub type Result<T> = std::result::Result<T, Error>;

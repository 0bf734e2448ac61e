use thiserror::Error;

/// Library-wide error type.
#[derive(Debug, Error)]
pub enum Error {
    /// A parameter violated its domain (non-positive std, even grid size, ...).
    #[error("invalid parameter: {0}")]
    InvalidParameter(String),

    /// Matrix/grid dimensions do not line up.
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),

    /// An operation was called on the wrong problem variant.
    #[error("variant mismatch: {0}")]
    VariantMismatch(String),

    /// A computation produced NaN/inf; carries enough context to locate it.
    #[error("non-finite value: {0}")]
    NonFinite(String),

    /// Run configuration could not be parsed or validated.
    #[error("config error: {0}")]
    Config(String),

    /// File import/export failure.
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),

    /// Malformed CSV content.
    #[error("csv error: {0}")]
    Csv(String),
}

pub type Result<T> = std::result::Result<T, Error>;

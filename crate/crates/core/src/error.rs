use alloc::string::String;

/// Errors raised by the sampling, optimisation and spectral routines.
#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum Error {
    #[error("dimension mismatch: {0}")]
    Dimension(String),

    #[error("numeric failure: {0}")]
    Numeric(String),

    #[error("target lacks capability `{0}`")]
    Unsupported(&'static str),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("insufficient or invalid data: {0}")]
    Data(String),

    #[error("non-finite value at index {index} of {what}")]
    NonFinite { what: &'static str, index: usize },

    /// A state or tangent entry left the finite range (or exceeded the
    /// divergence guard) during a step.
    #[error("diverged at step {step}: {detail}")]
    Divergence { step: u64, detail: String },

    #[error("unsupported case: {0}")]
    UnsupportedCase(String),

    #[error("quadrature did not converge: {0}")]
    Accuracy(String),

    #[error("domain error: {0}")]
    Domain(String),

    #[error("logic error: {0}")]
    Logic(String),
}

pub type Result<T> = core::result::Result<T, Error>;

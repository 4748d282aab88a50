use thiserror::Error;

/// Errors raised by the numerical routines in this crate.
#[derive(Debug, Error)]
pub enum Error {
    #[error("matrix is not Hermitian (max |A - A^H| = {0:.3e})")]
    NotHermitian(f64),

    #[error("dimension mismatch: expected {expected}, found {found}")]
    Dimension { expected: usize, found: usize },

    #[error("eigenvalue {value:.3e} (index {index}) is below the floor {floor:.1e}")]
    EigenvalueBelowFloor {
        index: usize,
        value: f64,
        floor: f64,
    },

    #[error("invalid density matrix: {0}")]
    InvalidDensity(String),

    #[error("invalid parameter: {0}")]
    InvalidParameter(String),

    #[error("non-finite values produced by {0}")]
    NonFinite(&'static str),

    #[error("exponent overflow: {0}")]
    Overflow(String),

    #[error("normalization vanished ({0:.3e})")]
    VanishingNormalization(f64),

    #[error("protocol violation: {0}")]
    Protocol(String),

    #[error("fit failed: {0}")]
    Fit(String),

    #[error("not enough points: need {need}, found {found}")]
    InsufficientPoints { need: usize, found: usize },

    #[error("malformed data: {0}")]
    Format(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

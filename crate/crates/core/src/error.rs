use thiserror::Error;

/// Errors shared across the simulation and optimization layers.
#[derive(Debug, Error)]
pub enum Error {
    #[error("Fock cutoff must be at least 2, got {0}")]
    InvalidCutoff(usize),

    #[error("dimension mismatch: expected {expected}, got {got} ({context})")]
    DimensionMismatch {
        expected: usize,
        got: usize,
        context: &'static str,
    },

    #[error("quantum numbers out of range: s={s}, n1={n1}, n2={n2} for cutoffs ({c1}, {c2})")]
    OutOfRange {
        s: usize,
        n1: usize,
        n2: usize,
        c1: usize,
        c2: usize,
    },

    #[error("matrix is not Hermitian: max |M - M†| = {deviation:.3e}")]
    NotHermitian { deviation: f64 },

    #[error("operator failed the unitarity check: max |U†U - I| = {deviation:.3e}")]
    NotUnitary { deviation: f64 },

    #[error("numerical consistency failure: {0}")]
    NumericalConsistency(String),

    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("state pairs are not orthonormal: {0}")]
    NonOrthonormalPairs(String),

    #[error(
        "cost increased by {increase:.3e} at iteration {iter}; \
         the inverse step size is too small or the time grid too coarse"
    )]
    NonMonotone { iter: usize, increase: f64 },

    #[error("first-order jump expansion invalid: branch probability {p:.3e} exceeds 0.1; reduce dt")]
    JumpGuard { p: f64 },

    #[error("parse error at line {line}: {message}")]
    Parse { line: usize, message: String },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error("linear algebra backend failure: {0}")]
    Linalg(String),
}

impl From<ndarray_linalg::error::LinalgError> for Error {
    fn from(e: ndarray_linalg::error::LinalgError) -> Self {
        Error::Linalg(e.to_string())
    }
}

pub type Result<T> = std::result::Result<T, Error>;

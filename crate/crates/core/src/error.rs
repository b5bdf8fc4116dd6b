use thiserror::Error;

/// Errors raised anywhere in the crate.
#[derive(Debug, Error)]
pub enum Error {
    #[error("order mismatch: expected {expected}, found {found}")]
    OrderMismatch { expected: usize, found: usize },

    #[error("dimension mismatch: expected {expected}, found {found}")]
    DimensionMismatch { expected: usize, found: usize },

    #[error("integer overflow computing {0}")]
    Overflow(String),

    #[error("matrix is not positive definite (smallest eigenvalue {0:e})")]
    NotPositiveDefinite(f64),

    #[error("polynomial is not homogeneous of degree {0}")]
    NotHomogeneous(usize),

    #[error("polynomial is not harmonic for the given operator (residual {0:e})")]
    NotHarmonic(f64),

    #[error("invalid parameter: {0}")]
    InvalidParameter(String),

    #[error("unknown coefficient field `{0}`")]
    UnknownField(String),

    #[error("ellipticity violated: {0}")]
    Ellipticity(String),

    #[error("non-finite value encountered in {0}")]
    NonFinite(String),

    #[error("right-hand side has mean {mean:e}, exceeding tolerance {tol:e}")]
    NonZeroMean { mean: f64, tol: f64 },

    #[error("solver did not converge after {iterations} iterations (relative residual {residual:e})")]
    NotConverged { iterations: usize, residual: f64 },

    #[error("cancellation failure at order {order}: polynomial part ratio {ratio:e}")]
    Cancellation { order: usize, ratio: f64 },

    #[error("grid mismatch: {0}")]
    GridMismatch(String),

    #[error("window too small: {0}")]
    WindowTooSmall(String),

    #[error("order {requested} exceeds hierarchy order {available}")]
    OrderExceedsHierarchy { requested: usize, available: usize },

    #[error("fingerprint mismatch: expected {expected}, found {found}")]
    FingerprintMismatch { expected: String, found: String },

    #[error("format version mismatch: expected {expected}, found {found}")]
    VersionMismatch { expected: u32, found: u32 },

    #[error("truncated payload: expected {expected} bytes, found {found}")]
    Truncated { expected: usize, found: usize },

    #[error("malformed file: {0}")]
    Format(String),

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),

    #[error("toml error: {0}")]
    Toml(#[from] toml::de::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

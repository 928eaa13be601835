use thiserror::Error;

/// Errors produced by the mechanism library.
#[derive(Debug, Error)]
pub enum Error {
    #[error("value {value} is outside [{lo}, {hi}]")]
    OutOfRange { value: f64, lo: f64, hi: f64 },

    #[error("coordinate {index}: value {value} is outside [{lo}, {hi}]")]
    CoordinateOutOfRange {
        index: usize,
        value: f64,
        lo: f64,
        hi: f64,
    },

    #[error("vector norm {norm} exceeds the bound {bound}")]
    NormViolation { norm: f64, bound: f64 },

    #[error("rejection sampling gave up after {attempts} attempts (last norm {last_norm})")]
    SamplingFailure { attempts: usize, last_norm: f64 },

    #[error("invalid parameter: {0}")]
    InvalidParameter(String),

    #[error("dimension mismatch: {0}")]
    Dimension(String),

    #[error("alphabet magnitude {magnitude} is not representable")]
    AlphabetOverflow { magnitude: f64 },

    #[error("numerical failure: {0}")]
    Numeric(String),

    #[error("table document invalid at {path}: {message}")]
    Schema { path: String, message: String },

    #[error("table violates its declared tolerances: {0}")]
    Infeasible(String),

    #[error("exhaustive search needs {required} evaluations, limit is {limit}; use the LP or greedy bound")]
    SearchTooLarge { required: f64, limit: f64 },

    #[error("optimizer failure: {0}")]
    Solver(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

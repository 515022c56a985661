use thiserror::Error;

/// Errors produced anywhere in the crate.
#[derive(Debug, Error)]
pub enum Error {
    #[error("matrix is not square ({rows}x{cols})")]
    NonSquare { rows: usize, cols: usize },
    #[error("matrix is not Hermitian (residual {residual:.3e})")]
    NotHermitian { residual: f64 },
    #[error("matrix is not positive semidefinite (min eigenvalue {min_eigenvalue:.3e})")]
    NotPsd { min_eigenvalue: f64 },
    #[error("matrix columns are not orthonormal (residual {residual:.3e})")]
    NotIsometry { residual: f64 },
    #[error("decomposition did not converge")]
    ConvergenceFailure,
    #[error("dimension mismatch: expected {expected}, found {found}")]
    DimensionMismatch { expected: usize, found: usize },
    #[error("map is not trace preserving (residual {residual:.3e})")]
    NotTracePreserving { residual: f64 },
    #[error("non-finite matrix entry")]
    NonFinite,
    #[error("invalid noise level {delta} for {kind}")]
    InvalidDelta { kind: String, delta: f64 },
    #[error("channel is numerically singular (condition estimate {condition:.3e})")]
    SingularChannel { condition: f64 },
    #[error("sampled branch {index} has vanishing probability {probability:.3e}")]
    DegenerateBranch { index: usize, probability: f64 },
    #[error("branch probabilities sum to {total}, not 1")]
    ProbabilityDefect { total: f64 },
    #[error("invalid input: {0}")]
    Invalid(String),
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
    #[error(transparent)]
    Csv(#[from] csv::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

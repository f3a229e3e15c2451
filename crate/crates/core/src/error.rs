use thiserror::Error;

/// Which latent level a class index refers to.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Level {
    Low,
    High,
}

impl std::fmt::Display for Level {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Level::Low => write!(f, "low-level"),
            Level::High => write!(f, "high-level"),
        }
    }
}

#[derive(Debug, Error)]
pub enum MlcaError {
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),

    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("non-finite log-likelihood in group {group}")]
    NonFiniteLoglik { group: usize },

    #[error("degenerate {level} class {index}: posterior mass {mass:.3e}")]
    DegenerateClass { level: Level, index: usize, mass: f64 },

    #[error("design matrix is rank deficient: rank {rank} < {cols} columns")]
    RankDeficient { rank: usize, cols: usize },

    #[error("multinomial logit solver did not converge (gradient inf-norm {grad_norm:.3e})")]
    SolverNotConverged { grad_norm: f64 },

    #[error("information matrix is singular (condition number {condition:.3e})")]
    SingularInformation { condition: f64 },

    #[error("all {starts} EM starts failed: {last}")]
    AllStartsFailed { starts: usize, last: String },

    #[error("csv error at row {row}, column {column}: {message}")]
    Csv {
        row: usize,
        column: String,
        message: String,
    },

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl MlcaError {
    /// Numerical failures map to exit code 2, everything else to 1.
    pub fn is_numerical(&self) -> bool {
        matches!(
            self,
            MlcaError::NonFiniteLoglik { .. }
                | MlcaError::DegenerateClass { .. }
                | MlcaError::SolverNotConverged { .. }
                | MlcaError::SingularInformation { .. }
                | MlcaError::AllStartsFailed { .. }
        )
    }
}

pub type Result<T> = std::result::Result<T, MlcaError>;

use thiserror::Error;

/// Errors raised by estimation, inference and I/O routines.
#[derive(Debug, Error)]
pub enum SvarError {
    #[error("dimension error: {0}")]
    Dimension(String),

    #[error("singular regressor matrix in equation `{equation}` (regressor column {column})")]
    SingularDesign { equation: String, column: usize },

    #[error("matrix is numerically singular (|det| = {det:e})")]
    Singular { det: f64 },

    #[error("innovation {index} has zero sample variance")]
    DegenerateInnovation { index: usize },

    #[error("insufficient data: {0}")]
    InsufficientData(String),

    #[error("covariance matrix is not positive definite")]
    NotPositiveDefinite,

    #[error("equation {row} has a zero normalizing coefficient on variable {column}")]
    DegenerateEquation { row: usize, column: usize },

    #[error("variance decomposition undefined: variable {0} has zero forecast error variance")]
    UndefinedShare(usize),

    #[error("explosive VAR: companion spectral radius {0:.4} >= 1")]
    Explosive(f64),

    #[error("bootstrap failed: {0}")]
    Bootstrap(String),

    #[error("invalid input: {0}")]
    Invalid(String),

    #[error("line {line}, column {column}: {message}")]
    Parse {
        line: usize,
        column: usize,
        message: String,
    },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

impl SvarError {
    /// True for failures of the numerical machinery, as opposed to bad input.
    pub fn is_numerical(&self) -> bool {
        matches!(
            self,
            SvarError::SingularDesign { .. }
                | SvarError::Singular { .. }
                | SvarError::DegenerateInnovation { .. }
                | SvarError::NotPositiveDefinite
                | SvarError::DegenerateEquation { .. }
                | SvarError::UndefinedShare(_)
                | SvarError::Explosive(_)
                | SvarError::Bootstrap(_)
        )
    }
}

pub type Result<T> = std::result::Result<T, SvarError>;

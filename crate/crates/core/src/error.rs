use thiserror::Error;

/// Errors raised anywhere in the library.
#[derive(Debug, Error)]
pub enum DlimError {
    #[error("invalid specification: {0}")]
    Spec(String),

    #[error("value {value} lies outside the domain [{lo}, {hi}]")]
    Domain { value: f64, lo: f64, hi: f64 },

    #[error("dimension mismatch: {0}")]
    Dimension(String),

    #[error("invalid data: {0}")]
    Data(String),

    #[error("numerical failure: {0}")]
    Numerical(String),

    #[error("penalized IRLS failed to converge after {iterations} iterations")]
    NonConvergence {
        iterations: usize,
        /// Penalized deviance at every iteration.
        trace: Vec<f64>,
    },

    #[error("diagnostics check failed: {0}")]
    Diagnostics(String),

    #[error("configuration error: {0}")]
    Config(String),

    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),

    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

impl DlimError {
    /// Process exit code used by the command-line interface: 2 for
    /// configuration/input problems, 3 for numerical failures.
    pub fn exit_code(&self) -> i32 {
        match self {
            DlimError::Numerical(_)
            | DlimError::NonConvergence { .. }
            | DlimError::Diagnostics(_) => 3,
            _ => 2,
        }
    }
}

pub type Result<T> = std::result::Result<T, DlimError>;

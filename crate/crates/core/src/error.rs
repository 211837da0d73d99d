//! Crate-wide error type.

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    /// A matrix or vector does not have the shape required by the model
    /// dimensions. `field` names the offending object.
    #[error("dimension mismatch in `{field}`: {detail}")]
    Dimension { field: String, detail: String },

    /// Invalid input that is not a pure shape problem (non-finite data,
    /// nonpositive values under a log transform, bad configuration, ...).
    #[error("invalid input: {0}")]
    Invalid(String),

    /// A numerical operation failed (singular system, non-finite innovation
    /// covariance, covariance not positive semidefinite, ...).
    #[error("numerical failure at {context}: {detail}")]
    Numeric { context: String, detail: String },

    /// An iterative scheme did not converge within its iteration budget.
    #[error("{what} did not converge after {iterations} iterations (last residual {residual:.3e})")]
    NoConvergence {
        what: String,
        iterations: usize,
        residual: f64,
    },

    /// The likelihood decreased between EM iterations by more than the
    /// numerical slack, which indicates an implementation or input problem.
    #[error("log-likelihood decreased at iteration {iteration}: {previous:.9e} -> {current:.9e}")]
    LikelihoodDecrease {
        iteration: usize,
        previous: f64,
        current: f64,
    },
}

impl Error {
    pub fn dim(field: &str, detail: impl Into<String>) -> Self {
        Error::Dimension {
            field: field.to_string(),
            detail: detail.into(),
        }
    }

    pub fn numeric(context: impl Into<String>, detail: impl Into<String>) -> Self {
        Error::Numeric {
            context: context.into(),
            detail: detail.into(),
        }
    }
}

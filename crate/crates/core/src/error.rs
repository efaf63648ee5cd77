use alloc::string::String;

use crate::strategy::Strategy;

pub type Result<T> = core::result::Result<T, SparkleError>;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum SparkleError {
    /// A mixing matrix or strategy triple failed one of its structural checks.
    #[error("validation failed ({check}): {detail}")]
    Validation { check: &'static str, detail: String },

    #[error("invalid parameter `{name}`: {detail}")]
    InvalidParameter { name: &'static str, detail: String },

    #[error("unknown strategy `{0}` (expected one of ed, extra, atc-gt, semi-atc-gt, non-atc-gt, dgd)")]
    UnknownStrategy(String),

    #[error("strategy `{0}` has no recursion form")]
    NoRecursionForm(Strategy),

    #[error("dimension mismatch for {what}: expected {expected}, found {found}")]
    DimensionMismatch {
        what: &'static str,
        expected: usize,
        found: usize,
    },

    #[error("agent index {agent} out of range for {n} agents")]
    AgentOutOfRange { agent: usize, n: usize },

    #[error("matrix is not positive definite: {0}")]
    NotPositiveDefinite(&'static str),

    #[error("numeric failure: {0}")]
    Numeric(String),

    #[error("no convergence after {iterations} iterations (residual {residual:e})")]
    NonConvergence { iterations: usize, residual: f64 },

    #[error("diverged at iteration {iteration}: field `{field}` is non-finite or exceeds 1e12")]
    Diverged { iteration: usize, field: &'static str },
}

impl SparkleError {
    pub(crate) fn invalid(name: &'static str, detail: impl Into<String>) -> Self {
        SparkleError::InvalidParameter {
            name,
            detail: detail.into(),
        }
    }
}

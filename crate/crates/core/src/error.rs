//! Error types shared across the crate.

use std::fmt;

pub type Result<T> = std::result::Result<T, Error>;

/// Stepsize/weight rules that schedules are validated against at
/// construction time. `Display` prints the inequality itself so that a
/// rejected schedule names exactly what it violated.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ScheduleRule {
    /// Mirror-descent stepsize rule `mu_d + 1/eta_k >= 0`.
    MirrorStepNonneg,
    /// Weighted mirror-descent rule `beta_k/eta_k <= beta_{k-1} * (mu_h + 1/eta_{k-1})`.
    MirrorWeightedStep,
    /// Dual-averaging weight rule `mu_d * sum_{t<=k} beta_t + lambda_k >= 0`.
    DualWeightNonneg,
    /// Dual-averaging regularization weights must not decrease: `lambda_{k+1} >= lambda_k`.
    DualLambdaNondecreasing,
    /// Subproblem uniqueness: `mu_k > 0` unless the regularizer is strongly convex.
    DualUniqueness,
}

impl fmt::Display for ScheduleRule {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            ScheduleRule::MirrorStepNonneg => "mu_d + 1/eta_k >= 0",
            ScheduleRule::MirrorWeightedStep => {
                "beta_k/eta_k <= beta_{k-1} * (mu_h + 1/eta_{k-1})"
            }
            ScheduleRule::DualWeightNonneg => "mu_d * sum_{t<=k} beta_t + lambda_k >= 0",
            ScheduleRule::DualLambdaNondecreasing => "lambda_{k+1} >= lambda_k",
            ScheduleRule::DualUniqueness => "mu_k > 0 (or strongly convex regularizer)",
        };
        f.write_str(s)
    }
}

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("invalid input: {0}")]
    InvalidInput(String),

    /// A point fell outside the domain of a geometry (e.g. nonpositive
    /// simplex component under the entropy distance).
    #[error("domain violation: {0}")]
    DomainViolation(String),

    #[error("schedule violates `{rule}` at k={k}: {detail}")]
    ScheduleViolation {
        rule: ScheduleRule,
        k: i64,
        detail: String,
    },

    /// Iterative solver exhausted its budget. Carries the best iterate so
    /// callers can inspect or reuse it.
    #[error("{context}: no convergence after {iterations} iterations (residual {residual:.3e})")]
    ConvergenceFailure {
        context: String,
        iterations: usize,
        residual: f64,
        best: Vec<f64>,
    },

    /// Run configuration failed cross-field validation; lists every
    /// violated constraint.
    #[error("invalid configuration:\n{}", violations.join("\n"))]
    InvalidConfig { violations: Vec<String> },

    #[error("environment does not support reset")]
    NoReset,

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error("serialization: {0}")]
    Serde(String),
}

impl From<serde_json::Error> for Error {
    fn from(e: serde_json::Error) -> Self {
        Error::Serde(e.to_string())
    }
}

impl From<csv::Error> for Error {
    fn from(e: csv::Error) -> Self {
        Error::Serde(e.to_string())
    }
}

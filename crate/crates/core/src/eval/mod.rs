//! Prediction-quality metrics, residual diagnostics and non-GP baselines.

mod baselines;
mod metrics;
mod residuals;

use thiserror::Error;

pub use baselines::{knn_predict, LinearModel, DEFAULT_KNN_K};
pub use metrics::{compare_models, compute_metrics, Comparison, MetricsReport, Predictive, TAIL_FRACTION};
pub use residuals::{residual_diagnostics, ResidualDiagnostics};

#[derive(Debug, Clone, PartialEq, Error)]
pub enum EvalError {
    #[error("length mismatch: {expected} targets, {found} predictions")]
    LengthMismatch { expected: usize, found: usize },
    #[error("nothing to evaluate")]
    Empty,
    #[error("k = {k} exceeds the {n} training points")]
    KTooLarge { k: usize, n: usize },
    #[error("design matrix is rank deficient; dependent columns: {}", .0.join(", "))]
    RankDeficient(Vec<String>),
    #[error("linear regression needs more rows than coefficients ({rows} ≤ {coefficients})")]
    TooFewRows { rows: usize, coefficients: usize },
    #[error("comparison needs at least two models, got {0}")]
    TooFewModels(usize),
    #[error("non-finite value in evaluation data")]
    NonFinite,
}

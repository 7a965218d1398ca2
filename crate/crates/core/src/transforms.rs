//! Invertible per-column preprocessing: z-scoring, log and Box-Cox, fitted on
//! training rows only, plus quantile back-transformation of Gaussian
//! predictive distributions.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::gp::PredictiveDistribution;

/// Two-sided 95% standard-normal quantile.
pub const Z95: f64 = 1.959_964;

const BOXCOX_LAMBDA_RANGE: (f64, f64) = (-2.0, 2.0);
const BOXCOX_TOL: f64 = 1e-4;
const MIN_STD: f64 = 1e-12;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum TransformError {
    #[error("column is empty")]
    EmptyColumn,
    #[error("column contains non-finite values")]
    NonFinite,
    #[error("column is (numerically) constant: std {0:e} < 1e-12")]
    DegenerateColumn(f64),
    #[error("value {value} at row {index} is not positive after shift {shift}")]
    NonPositiveAfterShift { index: usize, value: f64, shift: f64 },
    #[error("value {value} at row {index} is outside the transform's domain")]
    DomainError { index: usize, value: f64 },
    #[error("transforms were fitted on {expected} but training data is {found}; refusing to leak non-training statistics")]
    Leakage { expected: String, found: String },
    #[error("expected {expected} columns, found {found}")]
    ColumnMismatch { expected: usize, found: usize },
}

/// What to fit for one step of a column pipeline.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum StepKind {
    Identity,
    #[serde(alias = "z-score", alias = "z_score")]
    ZScore,
    Log,
    #[serde(alias = "box-cox", alias = "box_cox")]
    BoxCox,
}

/// A fitted monotone increasing transform.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Step {
    Identity,
    ZScore { mean: f64, std: f64 },
    Log { shift: f64 },
    BoxCox { lambda: f64, shift: f64 },
}

fn boxcox(y: f64, lambda: f64) -> f64 {
    if lambda == 0.0 {
        y.ln()
    } else {
        (lambda * y.ln()).exp_m1() / lambda
    }
}

fn auto_shift(values: &[f64]) -> f64 {
    let (lo, hi) = values.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), &v| (a.min(v), b.max(v)));
    let eps = 1e-6 * (hi - lo);
    (eps - lo).max(0.0)
}

fn shifted_logs(values: &[f64], shift: f64) -> Result<Vec<f64>, TransformError> {
    values
        .iter()
        .enumerate()
        .map(|(index, &v)| {
            let s = v + shift;
            if s > 0.0 {
                Ok(s.ln())
            } else {
                Err(TransformError::NonPositiveAfterShift { index, value: v, shift })
            }
        })
        .collect()
}

/// Box-Cox profile log-likelihood `−n/2·log σ̂²(λ) + (λ−1)·Σ log y`.
fn boxcox_profile(logs: &[f64], lambda: f64) -> f64 {
    let n = logs.len() as f64;
    let t: Vec<f64> = logs
        .iter()
        .map(|&l| if lambda == 0.0 { l } else { (lambda * l).exp_m1() / lambda })
        .collect();
    let mean = t.iter().sum::<f64>() / n;
    let var = t.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
    -0.5 * n * var.ln() + (lambda - 1.0) * logs.iter().sum::<f64>()
}

/// Maximizes a unimodal `f` on `[a, b]` by golden-section search.
fn golden_max(f: impl Fn(f64) -> f64, mut a: f64, mut b: f64, tol: f64) -> f64 {
    let r = (5f64.sqrt() - 1.0) / 2.0;
    let mut c = b - r * (b - a);
    let mut d = a + r * (b - a);
    let (mut fc, mut fd) = (f(c), f(d));
    while b - a > tol {
        if fc > fd {
            b = d;
            d = c;
            fd = fc;
            c = b - r * (b - a);
            fc = f(c);
        } else {
            a = c;
            c = d;
            fc = fd;
            d = a + r * (b - a);
            fd = f(d);
        }
    }
    0.5 * (a + b)
}

impl Step {
    /// Fits a step of the requested kind to `values`.
    pub fn fit(values: &[f64], kind: StepKind) -> Result<Step, TransformError> {
        if values.is_empty() {
            return Err(TransformError::EmptyColumn);
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(TransformError::NonFinite);
        }
        Ok(match kind {
            StepKind::Identity => Step::Identity,
            StepKind::ZScore => {
                let n = values.len() as f64;
                let mean = values.iter().sum::<f64>() / n;
                let std = if values.len() > 1 {
                    (values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt()
                } else {
                    0.0
                };
                if !(std >= MIN_STD) {
                    return Err(TransformError::DegenerateColumn(std));
                }
                Step::ZScore { mean, std }
            }
            StepKind::Log => {
                let shift = auto_shift(values);
                shifted_logs(values, shift)?;
                Step::Log { shift }
            }
            StepKind::BoxCox => {
                let shift = auto_shift(values);
                let logs = shifted_logs(values, shift)?;
                let (lo, hi) = BOXCOX_LAMBDA_RANGE;
                let lambda = golden_max(|l| boxcox_profile(&logs, l), lo, hi, BOXCOX_TOL);
                Step::BoxCox { lambda, shift }
            }
        })
    }

    pub fn apply_one(&self, y: f64) -> Option<f64> {
        let out = match *self {
            Step::Identity => y,
            Step::ZScore { mean, std } => (y - mean) / std,
            Step::Log { shift } => {
                if y + shift <= 0.0 {
                    return None;
                }
                (y + shift).ln()
            }
            Step::BoxCox { lambda, shift } => {
                if y + shift <= 0.0 {
                    return None;
                }
                boxcox(y + shift, lambda)
            }
        };
        out.is_finite().then_some(out)
    }

    pub fn inverse_one(&self, t: f64) -> Option<f64> {
        let out = match *self {
            Step::Identity => t,
            Step::ZScore { mean, std } => t * std + mean,
            Step::Log { shift } => t.exp() - shift,
            Step::BoxCox { lambda, shift } => {
                if lambda == 0.0 {
                    t.exp() - shift
                } else {
                    let base = lambda * t + 1.0;
                    if base <= 0.0 {
                        return None;
                    }
                    base.powf(1.0 / lambda) - shift
                }
            }
        };
        out.is_finite().then_some(out)
    }

    /// `log |d apply / dy|` at `y`.
    pub fn log_jacobian_one(&self, y: f64) -> f64 {
        match *self {
            Step::Identity => 0.0,
            Step::ZScore { std, .. } => -std.ln(),
            Step::Log { shift } => -(y + shift).ln(),
            Step::BoxCox { lambda, shift } => (lambda - 1.0) * (y + shift).ln(),
        }
    }
}

/// A chain of steps applied left to right to one column.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ColumnTransform {
    pub steps: Vec<Step>,
}

/// Back-transformed predictive summary in original units.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Interval {
    pub median: f64,
    pub lower: f64,
    pub upper: f64,
}

impl ColumnTransform {
    pub fn identity() -> Self {
        Self { steps: vec![] }
    }

    /// Fits each requested step on the output of the previous one.
    pub fn fit(values: &[f64], request: &[StepKind]) -> Result<Self, TransformError> {
        let mut current = values.to_vec();
        let mut steps = Vec::with_capacity(request.len());
        for &kind in request {
            let step = Step::fit(&current, kind)?;
            current = apply_step(&step, &current)?;
            steps.push(step);
        }
        Ok(Self { steps })
    }

    pub fn apply_one(&self, y: f64) -> Option<f64> {
        self.steps.iter().try_fold(y, |v, s| s.apply_one(v))
    }

    pub fn inverse_one(&self, t: f64) -> Option<f64> {
        self.steps.iter().rev().try_fold(t, |v, s| s.inverse_one(v))
    }

    pub fn apply(&self, values: &[f64]) -> Result<Vec<f64>, TransformError> {
        map_checked(values, |v| self.apply_one(v))
    }

    pub fn inverse(&self, values: &[f64]) -> Result<Vec<f64>, TransformError> {
        map_checked(values, |v| self.inverse_one(v))
    }

    /// `log |d apply / dy|` at `y`, for densities on the original scale.
    pub fn log_jacobian(&self, y: f64) -> f64 {
        let mut v = y;
        let mut total = 0.0;
        for s in &self.steps {
            total += s.log_jacobian_one(v);
            v = s.apply_one(v).unwrap_or(f64::NAN);
        }
        total
    }

    /// Quantile mapping of Gaussian predictive marginals (transformed space,
    /// observation variance) to original units. Per-point domain failures
    /// are returned in place.
    pub fn inverse_predictive(&self, pred: &PredictiveDistribution) -> Vec<Result<Interval, TransformError>> {
        pred.mean
            .iter()
            .zip(&pred.obs_var)
            .enumerate()
            .map(|(index, (&m, &v))| {
                let sd = v.sqrt();
                let map = |t: f64| self.inverse_one(t).ok_or(TransformError::DomainError { index, value: t });
                Ok(Interval { median: map(m)?, lower: map(m - Z95 * sd)?, upper: map(m + Z95 * sd)? })
            })
            .collect()
    }
}

fn apply_step(step: &Step, values: &[f64]) -> Result<Vec<f64>, TransformError> {
    map_checked(values, |v| step.apply_one(v))
}

fn map_checked(values: &[f64], f: impl Fn(f64) -> Option<f64>) -> Result<Vec<f64>, TransformError> {
    values
        .iter()
        .enumerate()
        .map(|(index, &v)| f(v).ok_or(TransformError::DomainError { index, value: v }))
        .collect()
}

/// Row count plus SHA-256 of the training inputs and targets.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Fingerprint {
    pub rows: usize,
    pub sha256: String,
}

impl Fingerprint {
    pub fn of(x: &DMatrix<f64>, y: &DVector<f64>) -> Self {
        let mut h = Sha256::new();
        h.update((x.nrows() as u64).to_le_bytes());
        h.update((x.ncols() as u64).to_le_bytes());
        for i in 0..x.nrows() {
            for j in 0..x.ncols() {
                h.update(x[(i, j)].to_le_bytes());
            }
        }
        for v in y.iter() {
            h.update(v.to_le_bytes());
        }
        let sha256 = h.finalize().iter().map(|b| format!("{b:02x}")).collect();
        Self { rows: x.nrows(), sha256 }
    }
}

impl std::fmt::Display for Fingerprint {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{} rows/{}", self.rows, &self.sha256[..12])
    }
}

/// Transforms for every input column and the target, bound to the training
/// set they were fitted on.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TransformSpec {
    pub inputs: Vec<(String, ColumnTransform)>,
    pub target: ColumnTransform,
    pub fitted_on: Fingerprint,
}

impl TransformSpec {
    /// Fits one request per input column and one for the target.
    pub fn fit(
        x: &DMatrix<f64>,
        names: &[String],
        y: &DVector<f64>,
        input_requests: &[Vec<StepKind>],
        target_request: &[StepKind],
    ) -> Result<Self, TransformError> {
        if names.len() != x.ncols() || input_requests.len() != x.ncols() {
            return Err(TransformError::ColumnMismatch { expected: x.ncols(), found: input_requests.len() });
        }
        let inputs = (0..x.ncols())
            .map(|j| {
                let col: Vec<f64> = x.column(j).iter().copied().collect();
                Ok((names[j].clone(), ColumnTransform::fit(&col, &input_requests[j])?))
            })
            .collect::<Result<Vec<_>, TransformError>>()?;
        let target = ColumnTransform::fit(y.as_slice(), target_request)?;
        Ok(Self { inputs, target, fitted_on: Fingerprint::of(x, y) })
    }

    pub fn transform_inputs(&self, x: &DMatrix<f64>) -> Result<DMatrix<f64>, TransformError> {
        if x.ncols() != self.inputs.len() {
            return Err(TransformError::ColumnMismatch { expected: self.inputs.len(), found: x.ncols() });
        }
        let mut out = x.clone();
        for (j, (_, t)) in self.inputs.iter().enumerate() {
            for i in 0..x.nrows() {
                out[(i, j)] = t
                    .apply_one(x[(i, j)])
                    .ok_or(TransformError::DomainError { index: i, value: x[(i, j)] })?;
            }
        }
        Ok(out)
    }

    pub fn transform_target(&self, y: &DVector<f64>) -> Result<DVector<f64>, TransformError> {
        Ok(DVector::from_vec(self.target.apply(y.as_slice())?))
    }

    /// Transforms data for model fitting. Refuses any data other than the
    /// exact training set the spec was fitted on.
    pub fn for_training(
        &self,
        x: &DMatrix<f64>,
        y: &DVector<f64>,
    ) -> Result<(DMatrix<f64>, DVector<f64>), TransformError> {
        let found = Fingerprint::of(x, y);
        if found != self.fitted_on {
            return Err(TransformError::Leakage { expected: self.fitted_on.to_string(), found: found.to_string() });
        }
        Ok((self.transform_inputs(x)?, self.transform_target(y)?))
    }
}

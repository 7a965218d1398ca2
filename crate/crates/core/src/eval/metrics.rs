use std::collections::BTreeMap;
use std::f64::consts::PI;
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use super::EvalError;
use crate::gp::PredictiveDistribution;
use crate::transforms::{ColumnTransform, Z95};

/// Share of the evaluated targets in each tail for the tail RMSEs.
pub const TAIL_FRACTION: f64 = 0.05;

/// Predictions on the original target scale.
#[derive(Clone, Debug, PartialEq)]
pub enum Predictive {
    /// Point predictions only (no density, no MLL).
    Point(Vec<f64>),
    /// Gaussian predictive marginals with observation variance.
    Gaussian { mean: Vec<f64>, obs_var: Vec<f64> },
    /// Gaussian in a transformed target space. The point prediction is the
    /// back-transformed median; densities carry the Jacobian of the transform.
    Transformed { median: Vec<f64>, mean: Vec<f64>, obs_var: Vec<f64>, transform: ColumnTransform },
}

impl Predictive {
    pub fn gaussian(p: &PredictiveDistribution) -> Self {
        Predictive::Gaussian { mean: p.mean.clone(), obs_var: p.obs_var.clone() }
    }

    /// Back-transforms a prediction made in the transformed space of `t`.
    /// Points whose median falls outside the inverse's range become NaN.
    pub fn transformed(p: &PredictiveDistribution, t: &ColumnTransform) -> Self {
        if t.steps.is_empty() {
            return Self::gaussian(p);
        }
        Predictive::Transformed {
            median: p.mean.iter().map(|&m| t.inverse_one(m).unwrap_or(f64::NAN)).collect(),
            mean: p.mean.clone(),
            obs_var: p.obs_var.clone(),
            transform: t.clone(),
        }
    }

    pub fn len(&self) -> usize {
        self.point().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Point predictions in original units.
    pub fn point(&self) -> &[f64] {
        match self {
            Predictive::Point(p) => p,
            Predictive::Gaussian { mean, .. } => mean,
            Predictive::Transformed { median, .. } => median,
        }
    }

    pub fn has_density(&self) -> bool {
        !matches!(self, Predictive::Point(_))
    }

    /// `−log p(y)` of point `i` on the original scale.
    pub fn nlpd(&self, i: usize, y: f64) -> Option<f64> {
        match self {
            Predictive::Point(_) => None,
            Predictive::Gaussian { mean, obs_var } => Some(gaussian_nll(y, mean[i], obs_var[i])),
            Predictive::Transformed { mean, obs_var, transform, .. } => {
                let t = transform.apply_one(y)?;
                Some(gaussian_nll(t, mean[i], obs_var[i]) - transform.log_jacobian(y))
            }
        }
    }

    /// Residual of point `i` divided by the predictive standard deviation,
    /// measured in the space where the prediction is Gaussian.
    pub fn standardized(&self, i: usize, y: f64) -> Option<f64> {
        let (r, var) = match self {
            Predictive::Point(_) => return None,
            Predictive::Gaussian { mean, obs_var } => (y - mean[i], obs_var[i]),
            Predictive::Transformed { mean, obs_var, transform, .. } => (transform.apply_one(y)? - mean[i], obs_var[i]),
        };
        Some(if r == 0.0 { 0.0 } else { r / var.sqrt() })
    }

    /// Central 95% interval of point `i` in original units.
    pub fn interval(&self, i: usize) -> Option<(f64, f64)> {
        match self {
            Predictive::Point(_) => None,
            Predictive::Gaussian { mean, obs_var } => {
                let h = Z95 * obs_var[i].sqrt();
                Some((mean[i] - h, mean[i] + h))
            }
            Predictive::Transformed { mean, obs_var, transform, .. } => {
                let h = Z95 * obs_var[i].sqrt();
                Some((transform.inverse_one(mean[i] - h)?, transform.inverse_one(mean[i] + h)?))
            }
        }
    }
}

fn gaussian_nll(y: f64, mean: f64, var: f64) -> f64 {
    0.5 * (2.0 * PI * var).ln() + 0.5 * (y - mean).powi(2) / var
}

/// Table-1-style metrics for one prediction set.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub rmse: f64,
    /// RMSE over the points whose true target is in the lowest 5%.
    pub rmse_p5: f64,
    /// RMSE over the points whose true target is in the highest 5%.
    pub rmse_p95: f64,
    /// Absent when the evaluated targets are all equal.
    pub r2: Option<f64>,
    /// Mean negative log predictive density; absent for point predictors.
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub mll: Option<f64>,
    pub mae: f64,
    /// Mean of prediction − truth.
    pub bias: f64,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub bic: Option<f64>,
    pub n: usize,
    /// Points whose density could not be evaluated (outside a transform's domain).
    #[serde(default)]
    pub invalid_density: usize,
}

impl MetricsReport {
    /// Adds `BIC = −2·LML + k·log n` for a single exact GP with `k` learnable
    /// hyperparameters fitted on `n_train` points.
    pub fn with_bic(mut self, lml: f64, k: usize, n_train: usize) -> Self {
        self.bic = Some(-2.0 * lml + k as f64 * (n_train as f64).ln());
        self
    }
}

fn rmse_of(residuals: impl Iterator<Item = f64>) -> f64 {
    let (mut s, mut n) = (0.0, 0usize);
    for r in residuals {
        s += r * r;
        n += 1;
    }
    (s / n as f64).sqrt()
}

/// Index sets of the lowest and highest `⌈0.05n⌉` true targets (ties broken
/// by position), kept disjoint.
pub(crate) fn tails(y: &[f64]) -> (Vec<usize>, Vec<usize>) {
    let n = y.len();
    let k = ((TAIL_FRACTION * n as f64).ceil() as usize).min(n / 2).max(1);
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| y[a].total_cmp(&y[b]).then(a.cmp(&b)));
    (order[..k].to_vec(), order[n - k..].to_vec())
}

pub fn compute_metrics(y: &[f64], pred: &Predictive) -> Result<MetricsReport, EvalError> {
    let n = y.len();
    if pred.len() != n {
        return Err(EvalError::LengthMismatch { expected: n, found: pred.len() });
    }
    if n == 0 {
        return Err(EvalError::Empty);
    }
    if y.iter().any(|v| !v.is_finite()) {
        return Err(EvalError::NonFinite);
    }
    let mu = pred.point();
    let resid: Vec<f64> = mu.iter().zip(y).map(|(m, t)| m - t).collect();
    let nf = n as f64;
    let rmse = rmse_of(resid.iter().copied());
    let (lo, hi) = tails(y);
    let y_bar = y.iter().sum::<f64>() / nf;
    let ss_tot: f64 = y.iter().map(|t| (t - y_bar).powi(2)).sum();
    let ss_res: f64 = resid.iter().map(|r| r * r).sum();
    let (mll, invalid_density) = if pred.has_density() {
        let mut total = 0.0;
        let mut bad = 0;
        for (i, &t) in y.iter().enumerate() {
            match pred.nlpd(i, t) {
                Some(v) if v.is_finite() => total += v,
                _ => bad += 1,
            }
        }
        (if bad == 0 { Some(total / nf) } else { None }, bad)
    } else {
        (None, 0)
    };
    Ok(MetricsReport {
        rmse,
        rmse_p5: rmse_of(lo.iter().map(|&i| resid[i])),
        rmse_p95: rmse_of(hi.iter().map(|&i| resid[i])),
        r2: (ss_tot > 0.0).then(|| 1.0 - ss_res / ss_tot),
        mll,
        mae: resid.iter().map(|r| r.abs()).sum::<f64>() / nf,
        bias: resid.iter().sum::<f64>() / nf,
        bic: None,
        n,
        invalid_density,
    })
}

/// Metrics for several models on the same targets, with per-metric ranks.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Comparison {
    pub reports: Vec<(String, MetricsReport)>,
    /// Metric name → rank of each model (1 = best; ties share the better
    /// rank; `None` where the metric is absent).
    pub ranks: BTreeMap<String, Vec<Option<usize>>>,
}

const METRICS: [&str; 8] = ["rmse", "rmse_p5", "rmse_p95", "r2", "mll", "mae", "bias", "bic"];

/// Value of a metric oriented so that smaller is better.
fn score(r: &MetricsReport, metric: &str) -> Option<f64> {
    match metric {
        "rmse" => Some(r.rmse),
        "rmse_p5" => Some(r.rmse_p5),
        "rmse_p95" => Some(r.rmse_p95),
        "r2" => r.r2.map(|v| -v),
        "mll" => r.mll,
        "mae" => Some(r.mae),
        "bias" => Some(r.bias.abs()),
        "bic" => r.bic,
        _ => None,
    }
}

pub fn compare_models(models: &[(String, Predictive)], y: &[f64]) -> Result<Comparison, EvalError> {
    if models.len() < 2 {
        return Err(EvalError::TooFewModels(models.len()));
    }
    let reports = models
        .iter()
        .map(|(name, p)| Ok((name.clone(), compute_metrics(y, p)?)))
        .collect::<Result<Vec<_>, EvalError>>()?;
    Ok(rank(reports))
}

/// Competition ranking of already computed reports.
pub(crate) fn rank(reports: Vec<(String, MetricsReport)>) -> Comparison {
    let mut ranks = BTreeMap::new();
    for metric in METRICS {
        let scores: Vec<Option<f64>> = reports.iter().map(|(_, r)| score(r, metric)).collect();
        let ranked = scores
            .iter()
            .map(|s| s.map(|v| 1 + scores.iter().flatten().filter(|&&o| o < v).count()))
            .collect();
        ranks.insert(metric.to_string(), ranked);
    }
    Comparison { reports, ranks }
}

impl Comparison {
    /// Builds a comparison from reports computed elsewhere (e.g. with BIC).
    pub fn from_reports(reports: Vec<(String, MetricsReport)>) -> Self {
        rank(reports)
    }

    /// Plain-text grid, one row per model.
    pub fn to_table(&self) -> String {
        let fmt = |v: Option<f64>| v.map_or("N/A".to_string(), |x| format!("{x:.4}"));
        let width = self.reports.iter().map(|(n, _)| n.len()).max().unwrap_or(5).max(5);
        let mut out = format!("{:<width$}", "model");
        for h in ["RMSE", "RMSE 5", "RMSE 95", "R2", "MLL", "MAE", "bias", "BIC", "n"] {
            let _ = write!(out, " {h:>10}");
        }
        out.push('\n');
        for (name, r) in &self.reports {
            let _ = write!(out, "{name:<width$}");
            for v in [Some(r.rmse), Some(r.rmse_p5), Some(r.rmse_p95), r.r2, r.mll, Some(r.mae), Some(r.bias), r.bic] {
                let _ = write!(out, " {:>10}", fmt(v));
            }
            let _ = writeln!(out, " {:>10}", r.n);
        }
        out
    }
}

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use super::{EvalError, Predictive};

const QUANTILES: [f64; 5] = [0.025, 0.25, 0.5, 0.75, 0.975];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ResidualDiagnostics {
    /// `(y − μ*) / obs_std`, in the space where the prediction is Gaussian.
    pub standardized: Vec<f64>,
    pub standardized_mean: f64,
    pub standardized_std: f64,
    /// Share of targets inside their 95% predictive interval.
    pub coverage95: f64,
    /// Pearson correlation of the raw residuals with each feature.
    pub feature_correlation: Vec<(String, Option<f64>)>,
    /// `(q, quantile)` pairs of the standardized residuals.
    pub quantiles: Vec<(f64, f64)>,
}

fn pearson(a: &[f64], b: &[f64]) -> Option<f64> {
    let n = a.len() as f64;
    let (ma, mb) = (a.iter().sum::<f64>() / n, b.iter().sum::<f64>() / n);
    let (mut sab, mut saa, mut sbb) = (0.0, 0.0, 0.0);
    for (x, y) in a.iter().zip(b) {
        sab += (x - ma) * (y - mb);
        saa += (x - ma).powi(2);
        sbb += (y - mb).powi(2);
    }
    (saa > 0.0 && sbb > 0.0).then(|| sab / (saa * sbb).sqrt())
}

/// Linear-interpolated quantile of sorted data.
fn quantile(sorted: &[f64], q: f64) -> f64 {
    let pos = q * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    sorted[lo] + (sorted[hi] - sorted[lo]) * (pos - lo as f64)
}

/// Standardized residuals, interval coverage and residual/feature
/// correlations. `pred` must carry a predictive density.
pub fn residual_diagnostics(
    y: &[f64],
    pred: &Predictive,
    features: &DMatrix<f64>,
    feature_names: &[String],
) -> Result<ResidualDiagnostics, EvalError> {
    let n = y.len();
    if pred.len() != n || features.nrows() != n {
        return Err(EvalError::LengthMismatch { expected: n, found: pred.len().min(features.nrows()) });
    }
    if n == 0 || !pred.has_density() {
        return Err(EvalError::Empty);
    }
    let standardized: Vec<f64> = (0..n).map(|i| pred.standardized(i, y[i]).unwrap_or(f64::NAN)).collect();
    let finite: Vec<f64> = standardized.iter().copied().filter(|v| v.is_finite()).collect();
    let nf = finite.len().max(1) as f64;
    let mean = finite.iter().sum::<f64>() / nf;
    let std = (finite.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (nf - 1.0).max(1.0)).sqrt();
    let covered = (0..n)
        .filter(|&i| pred.interval(i).is_some_and(|(lo, hi)| lo <= y[i] && y[i] <= hi))
        .count();
    let resid: Vec<f64> = pred.point().iter().zip(y).map(|(m, t)| t - m).collect();
    let feature_correlation = feature_names
        .iter()
        .enumerate()
        .map(|(j, name)| (name.clone(), pearson(&resid, features.column(j).as_slice())))
        .collect();
    let mut sorted = finite.clone();
    sorted.sort_by(f64::total_cmp);
    let quantiles = if sorted.is_empty() {
        Vec::new()
    } else {
        QUANTILES.iter().map(|&q| (q, quantile(&sorted, q))).collect()
    };
    Ok(ResidualDiagnostics {
        standardized,
        standardized_mean: mean,
        standardized_std: std,
        coverage95: covered as f64 / n as f64,
        feature_correlation,
        quantiles,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gp::{fit_cache, generate_synthetic, predict, GpModel};
    use crate::kernels::parse_kernel_expr;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use rand_distr::StandardNormal;

    #[test]
    fn exact_fit_has_zero_residuals() {
        let y = vec![1.0, 2.0, 3.0];
        let p = Predictive::Gaussian { mean: y.clone(), obs_var: vec![0.0; 3] };
        let x = DMatrix::from_fn(3, 1, |i, _| i as f64);
        let d = residual_diagnostics(&y, &p, &x, &["x".into()]).unwrap();
        assert_eq!(d.standardized, vec![0.0; 3]);
        assert_eq!(d.coverage95, 1.0);
    }

    #[test]
    fn noise_is_uncorrelated_with_random_feature() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let n = 2000;
        let y: Vec<f64> = (0..n).map(|_| rng.sample(StandardNormal)).collect();
        let x = DMatrix::from_fn(n, 1, |_, _| rng.random_range(0.0..1.0));
        let p = Predictive::Gaussian { mean: vec![0.0; n], obs_var: vec![1.0; n] };
        let d = residual_diagnostics(&y, &p, &x, &["u".into()]).unwrap();
        assert!(d.feature_correlation[0].1.unwrap().abs() < 0.08);
    }

    #[test]
    fn calibrated_on_well_specified_gp() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut k = parse_kernel_expr("Mat32(x)", &["x".to_string()]).unwrap();
        k.params_mut()[1].set_value(2.0);
        let truth = GpModel::new(k, 0.1);
        let n = 2000;
        let x = DMatrix::from_fn(n, 1, |_, _| rng.random_range(0.0..100.0));
        let y = generate_synthetic(&truth, &x, 3).unwrap().observed;
        let train: Vec<usize> = (0..n).step_by(2).collect();
        let test: Vec<usize> = (1..n).step_by(2).collect();
        let (xt, yt) = (x.select_rows(&train), y.select_rows(&train));
        let cache = fit_cache(&truth, &xt, &yt).unwrap();
        let xs = x.select_rows(&test);
        let p = Predictive::gaussian(&predict(&truth, &cache, &xs).unwrap());
        let ys: Vec<f64> = test.iter().map(|&i| y[i]).collect();
        let d = residual_diagnostics(&ys, &p, &xs, &["x".into()]).unwrap();
        assert!((0.925..=0.975).contains(&d.coverage95), "{}", d.coverage95);
        assert!((0.9..=1.1).contains(&d.standardized_std), "{}", d.standardized_std);
    }

    #[test]
    fn point_predictions_are_rejected() {
        let x = DMatrix::zeros(1, 1);
        assert_eq!(residual_diagnostics(&[1.0], &Predictive::Point(vec![1.0]), &x, &["x".into()]), Err(EvalError::Empty));
    }
}

use nalgebra::{DMatrix, DVector};

use super::TrainError;
use crate::gp::GpModel;
use crate::kernels::{KernelError, KernelExpr, KernelKind};

const MAX_INIT_POINTS: usize = 1000;
const VARIANCE_FLOOR: f64 = 1e-6;

/// Evenly strided subset of at most `MAX_INIT_POINTS` rows.
fn subsample_rows(n: usize) -> Vec<usize> {
    if n <= MAX_INIT_POINTS {
        (0..n).collect()
    } else {
        (0..MAX_INIT_POINTS).map(|i| i * n / MAX_INIT_POINTS).collect()
    }
}

fn median(mut v: Vec<f64>) -> f64 {
    let n = v.len();
    if n == 0 {
        return 0.0;
    }
    let mid = n / 2;
    let (lo, m, _) = v.select_nth_unstable_by(mid, f64::total_cmp);
    let m = *m;
    if n % 2 == 1 {
        m
    } else {
        let below = lo.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        0.5 * (below + m)
    }
}

/// Median Euclidean distance between distinct rows of `x` restricted to
/// `columns`, over a deterministic subsample of at most 1000 rows.
pub fn median_pairwise_distance(x: &DMatrix<f64>, columns: &[usize]) -> f64 {
    let rows = subsample_rows(x.nrows());
    let mut d = Vec::with_capacity(rows.len() * rows.len().saturating_sub(1) / 2);
    for (a, &i) in rows.iter().enumerate() {
        for &j in &rows[a + 1..] {
            let s: f64 = columns.iter().map(|&c| (x[(i, c)] - x[(j, c)]).powi(2)).sum();
            d.push(s.sqrt());
        }
    }
    median(d)
}

fn sample_variance(y: &DVector<f64>) -> f64 {
    let n = y.len();
    if n < 2 {
        return 0.0;
    }
    let mean = y.mean();
    y.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1) as f64
}

fn assign_variance(expr: &mut KernelExpr, share: f64) {
    match expr {
        KernelExpr::Leaf(k) => {
            if k.variance.learnable {
                k.variance.set_value(share);
            }
        }
        KernelExpr::Sum(children) => {
            let each = share / children.len() as f64;
            for c in children {
                assign_variance(c, each);
            }
        }
        KernelExpr::Product(children) => {
            for (i, c) in children.iter_mut().enumerate() {
                assign_variance(c, if i == 0 { share } else { 1.0 });
            }
        }
    }
}

/// Data-driven starting values.
///
/// Lengthscales start at the median pairwise distance in each leaf's feature
/// subspace (per feature for ARD leaves). Signal variance starts at `var(y)`,
/// split evenly over the terms of a sum; in a product the first factor
/// carries the variance and the others start at 1. Noise starts at
/// `0.1·var(y)`. `var(y)` is floored at 1e-6. Periodic leaves start with
/// lengthscale 1 and period equal to the median distance. Parameters marked
/// non-learnable keep their values; `overrides` (by parameter name) win over
/// everything.
pub fn initialize_hyperparams(
    model: &GpModel,
    x: &DMatrix<f64>,
    y: &DVector<f64>,
    overrides: &[(String, f64)],
) -> Result<GpModel, TrainError> {
    let mut m = model.clone();
    let var_y = sample_variance(y).max(VARIANCE_FLOOR);
    assign_variance(&mut m.kernel, var_y);
    for leaf in m.kernel.leaves_mut() {
        let dists: Vec<f64> = if leaf.ard {
            leaf.columns.iter().map(|&c| median_pairwise_distance(x, &[c])).collect()
        } else {
            vec![median_pairwise_distance(x, &leaf.columns)]
        };
        if let Some(i) = dists.iter().position(|&d| !(d > 0.0)) {
            let which = if leaf.ard { leaf.features[i].clone() } else { leaf.features.join(",") };
            return Err(TrainError::DegenerateData(format!(
                "median pairwise distance over [{which}] is zero"
            )));
        }
        if leaf.kind == KernelKind::Periodic {
            if leaf.lengthscales[0].learnable {
                leaf.lengthscales[0].set_value(1.0);
            }
            if let Some(p) = leaf.period.as_mut().filter(|p| p.learnable) {
                p.set_value(dists[0]);
            }
        } else {
            for (l, d) in leaf.lengthscales.iter_mut().zip(&dists) {
                if l.learnable {
                    l.set_value(*d);
                }
            }
        }
    }
    if m.noise.learnable {
        m.noise.set_value(0.1 * var_y);
    }
    for (name, value) in overrides {
        apply_override(&mut m, name, *value)?;
    }
    m.kernel.project();
    m.noise.project();
    Ok(m)
}

fn apply_override(m: &mut GpModel, name: &str, value: f64) -> Result<(), TrainError> {
    if let Some(p) = m.kernel.param_mut(name) {
        check_positive(name, value)?;
        p.set_value(value);
        return Ok(());
    }
    if name == m.noise.name {
        if !(value >= 0.0 && value.is_finite()) {
            return Err(KernelError::InvalidHyperparameter(name.into()).into());
        }
        m.noise.set_value(value);
        return Ok(());
    }
    if let Some(i) = m.mean.param_names().iter().position(|n| n == name) {
        let mut v = m.mean.params();
        v[i] = value;
        m.mean.set_params(&v);
        return Ok(());
    }
    Err(KernelError::UnknownParameter(name.into()).into())
}

fn check_positive(name: &str, value: f64) -> Result<(), TrainError> {
    if value > 0.0 && value.is_finite() {
        Ok(())
    } else {
        Err(KernelError::InvalidHyperparameter(name.into()).into())
    }
}

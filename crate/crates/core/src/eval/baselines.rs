use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::EvalError;

pub const DEFAULT_KNN_K: usize = 10;

/// Inverse-distance weighted mean of the `k` nearest training targets
/// (Euclidean distance, ties in distance broken by training index). A query
/// that coincides with training points returns the mean of their targets.
pub fn knn_predict(x: &DMatrix<f64>, y: &DVector<f64>, xs: &DMatrix<f64>, k: usize) -> Result<Vec<f64>, EvalError> {
    let n = x.nrows();
    if y.len() != n {
        return Err(EvalError::LengthMismatch { expected: n, found: y.len() });
    }
    if k == 0 || k > n {
        return Err(EvalError::KTooLarge { k, n });
    }
    if xs.ncols() != x.ncols() {
        return Err(EvalError::LengthMismatch { expected: x.ncols(), found: xs.ncols() });
    }
    let xt = x.transpose();
    let queries: Vec<usize> = (0..xs.nrows()).collect();
    Ok(queries
        .par_iter()
        .map(|&q| {
            let query = xs.row(q).transpose();
            let mut d: Vec<(f64, usize)> =
                (0..n).map(|i| ((xt.column(i) - &query).norm_squared(), i)).collect();
            let by = |a: &(f64, usize), b: &(f64, usize)| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1));
            if k < n {
                d.select_nth_unstable_by(k - 1, by);
                d.truncate(k);
            }
            let exact: Vec<usize> = d.iter().filter(|p| p.0 == 0.0).map(|p| p.1).collect();
            if !exact.is_empty() {
                return exact.iter().map(|&i| y[i]).sum::<f64>() / exact.len() as f64;
            }
            let (mut num, mut den) = (0.0, 0.0);
            for (d2, i) in d {
                let w = 1.0 / d2.sqrt();
                num += w * y[i];
                den += w;
            }
            num / den
        })
        .collect())
}

/// Ordinary least squares with intercept.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LinearModel {
    pub coefficients: Vec<f64>,
    pub intercept: f64,
}

const RANK_TOL: f64 = 1e-10;

impl LinearModel {
    /// Fits through a column-pivoted QR of `[X, 1]`. Columns that pivot to
    /// a negligible diagonal are reported as dependent.
    pub fn fit(x: &DMatrix<f64>, y: &DVector<f64>, names: &[String]) -> Result<Self, EvalError> {
        let (n, d) = (x.nrows(), x.ncols());
        if y.len() != n {
            return Err(EvalError::LengthMismatch { expected: n, found: y.len() });
        }
        if n <= d + 1 {
            return Err(EvalError::TooFewRows { rows: n, coefficients: d + 1 });
        }
        if x.iter().chain(y.iter()).any(|v| !v.is_finite()) {
            return Err(EvalError::NonFinite);
        }
        let mut design = DMatrix::from_element(n, d + 1, 1.0);
        design.columns_mut(0, d).copy_from(x);
        let qr = design.col_piv_qr();
        let r = qr.r();
        let scale = r[(0, 0)].abs();
        let rank = (0..=d).take_while(|&i| r[(i, i)].abs() > RANK_TOL * scale.max(f64::MIN_POSITIVE)).count();
        if rank <= d {
            let mut order = DMatrix::from_fn(1, d + 1, |_, j| j as f64);
            qr.p().permute_columns(&mut order);
            let label = |j: usize| if j == d { "intercept".to_string() } else { names.get(j).cloned().unwrap_or(format!("x{j}")) };
            let dependent = (rank..=d).map(|i| label(order[(0, i)] as usize)).collect();
            return Err(EvalError::RankDeficient(dependent));
        }
        let mut qty = y.clone();
        qr.q_tr_mul(&mut qty);
        let top = r.view((0, 0), (d + 1, d + 1)).into_owned();
        let mut beta = top
            .solve_upper_triangular(&qty.rows(0, d + 1).into_owned())
            .ok_or_else(|| EvalError::RankDeficient(vec![]))?;
        qr.p().inv_permute_rows(&mut beta);
        Ok(Self { coefficients: beta.rows(0, d).iter().copied().collect(), intercept: beta[d] })
    }

    pub fn predict(&self, xs: &DMatrix<f64>) -> Vec<f64> {
        (0..xs.nrows())
            .map(|i| self.intercept + self.coefficients.iter().enumerate().map(|(j, c)| c * xs[(i, j)]).sum::<f64>())
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::eval::{compute_metrics, Predictive};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn knn_zero_distance_and_equal_weights() {
        let x = DMatrix::from_column_slice(3, 1, &[0.0, 1.0, 3.0]);
        let y = DVector::from_vec(vec![0.0, 1.0, 3.0]);
        assert_eq!(knn_predict(&x, &y, &DMatrix::from_element(1, 1, 1.0), 2).unwrap(), vec![1.0]);
        assert_eq!(knn_predict(&x, &y, &DMatrix::from_element(1, 1, 0.5), 2).unwrap(), vec![0.5]);
        let p = knn_predict(&x, &y, &DMatrix::from_element(1, 1, 2.0), 2).unwrap()[0];
        assert_eq!(p, 2.0);
        assert_eq!(knn_predict(&x, &y, &x, 4), Err(EvalError::KTooLarge { k: 4, n: 3 }));
    }

    #[test]
    fn knn_duplicate_hits_are_averaged() {
        let x = DMatrix::from_column_slice(3, 1, &[1.0, 1.0, 5.0]);
        let y = DVector::from_vec(vec![2.0, 4.0, 100.0]);
        assert_eq!(knn_predict(&x, &y, &DMatrix::from_element(1, 1, 1.0), 3).unwrap(), vec![3.0]);
    }

    #[test]
    fn knn_matches_brute_force_weights() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let x = DMatrix::from_fn(50, 2, |_, _| rng.random_range(-1.0..1.0));
        let y = DVector::from_fn(50, |_, _| rng.random_range(-1.0..1.0));
        let xs = DMatrix::from_fn(5, 2, |_, _| rng.random_range(-1.0..1.0));
        let got = knn_predict(&x, &y, &xs, 10).unwrap();
        for q in 0..5 {
            let mut d: Vec<(f64, usize)> = (0..50).map(|i| ((x.row(i) - xs.row(q)).norm(), i)).collect();
            d.sort_by(|a, b| a.0.total_cmp(&b.0));
            let w: Vec<(f64, usize)> = d[..10].iter().map(|&(dist, i)| (1.0 / dist, i)).collect();
            let expect = w.iter().map(|(a, i)| a * y[*i]).sum::<f64>() / w.iter().map(|p| p.0).sum::<f64>();
            assert!((got[q] - expect).abs() < 1e-12);
        }
    }

    #[test]
    fn exact_affine_recovery() {
        let x = DMatrix::from_fn(20, 1, |i, _| i as f64 * 0.3 - 2.0);
        let y = x.column(0).map(|v| 2.0 * v + 1.0);
        let m = LinearModel::fit(&x, &y, &["x".into()]).unwrap();
        assert!((m.coefficients[0] - 2.0).abs() < 1e-10);
        assert!((m.intercept - 1.0).abs() < 1e-10);
    }

    #[test]
    fn duplicated_column_is_rank_deficient() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let a: Vec<f64> = (0..30).map(|_| rng.random_range(0.0..1.0)).collect();
        let b: Vec<f64> = (0..30).map(|_| rng.random_range(0.0..1.0)).collect();
        let x = DMatrix::from_fn(30, 3, |i, j| if j == 1 { b[i] } else { a[i] });
        let y = DVector::from_fn(30, |i, _| a[i] + b[i]);
        let names: Vec<String> = vec!["a".into(), "b".into(), "a_copy".into()];
        match LinearModel::fit(&x, &y, &names) {
            Err(EvalError::RankDeficient(cols)) => {
                assert_eq!(cols.len(), 1);
                assert!(cols[0] == "a" || cols[0] == "a_copy");
            }
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn independent_target_has_low_r2() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let n = 5000;
        let x = DMatrix::from_fn(n, 3, |_, _| rng.random_range(-1.0..1.0));
        let y = DVector::from_fn(n, |_, _| rng.random_range(-1.0..1.0));
        let m = LinearModel::fit(&x, &y, &["a".into(), "b".into(), "c".into()]).unwrap();
        let r = compute_metrics(y.as_slice(), &Predictive::Point(m.predict(&x))).unwrap();
        assert!(r.r2.unwrap() < 0.05);
    }
}

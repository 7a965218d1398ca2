use nalgebra::{DMatrix, DVector};

use super::{check_data, GpError, GpModel};
use crate::kernels::CompiledKernel;

/// Conjugate-gradient solve of `A x = rhs` for symmetric positive definite
/// `A`. Stops once `‖A x − rhs‖ ≤ tol·‖rhs‖`.
pub fn solve_cg(a: &DMatrix<f64>, rhs: &DVector<f64>, tol: f64, max_iter: usize) -> Result<DVector<f64>, GpError> {
    let n = rhs.len();
    if a.nrows() != n || a.ncols() != n {
        return Err(GpError::DimensionMismatch { expected: n, found: a.nrows() });
    }
    let target = tol * rhs.norm();
    let mut x = DVector::zeros(n);
    let mut r = rhs.clone();
    let mut rr = r.norm_squared();
    if rr.sqrt() <= target {
        return Ok(x);
    }
    let mut p = r.clone();
    let mut ap = DVector::zeros(n);
    for _ in 0..max_iter {
        ap.gemv(1.0, a, &p, 0.0);
        let step = rr / p.dot(&ap);
        if !step.is_finite() {
            break;
        }
        x.axpy(step, &p, 1.0);
        r.axpy(-step, &ap, 1.0);
        let rr_next = r.norm_squared();
        if rr_next.sqrt() <= target {
            return Ok(x);
        }
        p.axpy(1.0, &r, rr_next / rr);
        rr = rr_next;
    }
    Err(GpError::NoConvergence(max_iter))
}

/// CG solve against the model's training covariance `K + σ_n²I`.
pub fn solve_cg_model(
    model: &GpModel,
    x: &DMatrix<f64>,
    rhs: &DVector<f64>,
    tol: f64,
    max_iter: usize,
) -> Result<DVector<f64>, GpError> {
    check_data(model, x, Some(rhs))?;
    let mut k = CompiledKernel::new(&model.kernel).gram(x);
    for i in 0..x.nrows() {
        k[(i, i)] += model.noise_variance();
    }
    solve_cg(&k, rhs, tol, max_iter)
}

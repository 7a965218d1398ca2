use nalgebra::{DMatrix, DVector, SymmetricEigen};

use super::ScaleError;
use crate::kernels::{eval_kernel, KernelExpr};

const LN_2PI: f64 = 1.837_877_066_409_345_5;

/// Applies `A₁ ⊗ A₂ ⊗ … ⊗ A_d` to `v`, with the first axis varying slowest.
pub fn kron_matvec(factors: &[&DMatrix<f64>], v: &DVector<f64>) -> DVector<f64> {
    let sizes: Vec<usize> = factors.iter().map(|f| f.ncols()).collect();
    assert_eq!(sizes.iter().product::<usize>(), v.len());
    let mut cur = v.as_slice().to_vec();
    let mut dims: Vec<usize> = sizes.clone();
    for (axis, f) in factors.iter().enumerate() {
        let before: usize = dims[..axis].iter().product();
        let after: usize = dims[axis + 1..].iter().product();
        let (n_in, n_out) = (f.ncols(), f.nrows());
        let mut next = vec![0.0; before * n_out * after];
        for b in 0..before {
            // block of shape n_in × after, row-major
            let src = DMatrix::from_row_slice(n_in, after, &cur[b * n_in * after..(b + 1) * n_in * after]);
            let prod = *f * src;
            let dst = &mut next[b * n_out * after..(b + 1) * n_out * after];
            for i in 0..n_out {
                for j in 0..after {
                    dst[i * after + j] = prod[(i, j)];
                }
            }
        }
        dims[axis] = n_out;
        cur = next;
    }
    DVector::from_vec(cur)
}

/// `(K₁ ⊗ … ⊗ K_d + σ²I)` over a full grid, diagonalized axis by axis.
#[derive(Clone, Debug)]
pub struct KroneckerSystem {
    pub noise: f64,
    vectors: Vec<DMatrix<f64>>,
    values: Vec<DVector<f64>>,
}

impl KroneckerSystem {
    /// Builds the system from per-axis covariance matrices.
    pub fn from_factors(factors: &[DMatrix<f64>], noise: f64) -> Result<Self, ScaleError> {
        if factors.is_empty() {
            return Err(ScaleError::GridMismatch("no axes".into()));
        }
        if !(noise > 0.0 && noise.is_finite()) {
            return Err(ScaleError::GridMismatch("noise variance must be positive".into()));
        }
        let mut vectors = Vec::new();
        let mut values = Vec::new();
        for (axis, k) in factors.iter().enumerate() {
            if !k.is_square() || k.nrows() == 0 {
                return Err(ScaleError::GridMismatch(format!("axis {axis} covariance is not square")));
            }
            let eig = SymmetricEigen::try_new(k.clone(), f64::EPSILON, 0).ok_or(ScaleError::EigenFailure(axis))?;
            if eig.eigenvalues.iter().chain(eig.eigenvectors.iter()).any(|v| !v.is_finite()) {
                return Err(ScaleError::EigenFailure(axis));
            }
            vectors.push(eig.eigenvectors);
            values.push(eig.eigenvalues);
        }
        Ok(Self { noise, vectors, values })
    }

    /// Evaluates one kernel per axis on that axis's coordinates.
    pub fn from_grid(kernels: &[KernelExpr], axes: &[DMatrix<f64>], noise: f64) -> Result<Self, ScaleError> {
        if kernels.len() != axes.len() {
            return Err(ScaleError::GridMismatch(format!("{} kernels for {} axes", kernels.len(), axes.len())));
        }
        let factors = kernels.iter().zip(axes).map(|(k, a)| eval_kernel(k, a, a)).collect::<Result<Vec<_>, _>>()?;
        Self::from_factors(&factors, noise)
    }

    pub fn axis_sizes(&self) -> Vec<usize> {
        self.values.iter().map(|v| v.len()).collect()
    }

    pub fn len(&self) -> usize {
        self.axis_sizes().iter().product()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Eigenvalues of the Kronecker product, in grid order.
    fn eigenvalues(&self) -> Vec<f64> {
        let mut out = vec![1.0];
        for vals in &self.values {
            out = out.iter().flat_map(|a| vals.iter().map(move |b| a * b)).collect();
        }
        out
    }

    fn check_len(&self, v: &DVector<f64>) -> Result<(), ScaleError> {
        if v.len() != self.len() {
            return Err(ScaleError::GridMismatch(format!("vector of length {} for a grid of {}", v.len(), self.len())));
        }
        Ok(())
    }

    /// Solves `(K + σ²I) x = rhs` as `Q (Λ + σ²)⁻¹ Qᵀ rhs`.
    pub fn solve(&self, rhs: &DVector<f64>) -> Result<DVector<f64>, ScaleError> {
        self.check_len(rhs)?;
        let qt: Vec<DMatrix<f64>> = self.vectors.iter().map(|q| q.transpose()).collect();
        let mut t = kron_matvec(&qt.iter().collect::<Vec<_>>(), rhs);
        for (x, l) in t.iter_mut().zip(self.eigenvalues()) {
            *x /= l.max(0.0) + self.noise;
        }
        Ok(kron_matvec(&self.vectors.iter().collect::<Vec<_>>(), &t))
    }

    /// `log N(y | 0, K + σ²I)`.
    pub fn log_marginal_likelihood(&self, y: &DVector<f64>) -> Result<f64, ScaleError> {
        let alpha = self.solve(y)?;
        let log_det: f64 = self.eigenvalues().iter().map(|l| (l.max(0.0) + self.noise).ln()).sum();
        Ok(-0.5 * y.dot(&alpha) - 0.5 * log_det - 0.5 * y.len() as f64 * LN_2PI)
    }

    /// Posterior mean `K α` at the grid points.
    pub fn posterior_mean(&self, y: &DVector<f64>) -> Result<DVector<f64>, ScaleError> {
        self.check_len(y)?;
        let qt: Vec<DMatrix<f64>> = self.vectors.iter().map(|q| q.transpose()).collect();
        let mut t = kron_matvec(&qt.iter().collect::<Vec<_>>(), y);
        for (x, l) in t.iter_mut().zip(self.eigenvalues()) {
            let l = l.max(0.0);
            *x *= l / (l + self.noise);
        }
        Ok(kron_matvec(&self.vectors.iter().collect::<Vec<_>>(), &t))
    }

    /// Latent posterior variance at the grid points:
    /// `Σⱼ Qᵢⱼ² λⱼσ²/(λⱼ+σ²)`, using `(Q∘Q)` factor by factor.
    pub fn posterior_variance(&self) -> Vec<f64> {
        let sq: Vec<DMatrix<f64>> = self.vectors.iter().map(|q| q.component_mul(q)).collect();
        let shrink = DVector::from_iterator(
            self.len(),
            self.eigenvalues().into_iter().map(|l| {
                let l = l.max(0.0);
                l * self.noise / (l + self.noise)
            }),
        );
        kron_matvec(&sq.iter().collect::<Vec<_>>(), &shrink).iter().map(|v| v.max(0.0)).collect()
    }
}

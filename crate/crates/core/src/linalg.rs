//! Dense linear-algebra kernels used by every inference path.
//!
//! nalgebra's own Cholesky and triangular solves work column by column and do
//! not reach gemm throughput. The routines here are right-looking blocked
//! variants whose inner updates are delegated to nalgebra's gemm, which is
//! backed by `matrixmultiply`. Results are independent of thread count.

use nalgebra::{DMatrix, DVector};

const BLOCK: usize = 64;

/// Lower Cholesky factor `L` with `A = L Lᵀ`.
#[derive(Clone, Debug)]
pub struct Cholesky {
    l: DMatrix<f64>,
}

impl Cholesky {
    /// Factors a symmetric matrix; only the lower triangle is read.
    ///
    /// Returns `None` when a pivot is non-finite or does not exceed
    /// `n·ε` times the original diagonal entry, which treats numerically
    /// singular matrices as failures instead of producing garbage factors.
    pub fn new(mut a: DMatrix<f64>) -> Option<Self> {
        let n = a.nrows();
        assert_eq!(n, a.ncols(), "Cholesky of a non-square matrix");
        let diag: Vec<f64> = (0..n).map(|i| a[(i, i)]).collect();
        let tol = n.max(1) as f64 * f64::EPSILON;

        let mut k = 0;
        while k < n {
            let b = BLOCK.min(n - k);
            factor_diagonal_block(&mut a, k, b, &diag, tol)?;
            let rest = n - k - b;
            if rest > 0 {
                let l11_inv = lower_inverse_small(&a.view((k, k), (b, b)).clone_owned());
                let l21 = a.view((k + b, k), (rest, b)) * l11_inv.transpose();
                a.view_mut((k + b, k), (rest, b)).copy_from(&l21);
                let l21t = l21.transpose();
                a.view_mut((k + b, k + b), (rest, rest))
                    .gemm(-1.0, &l21, &l21t, 1.0);
            }
            k += b;
        }
        a.fill_upper_triangle(0.0, 1);
        Some(Self { l: a })
    }

    pub fn dim(&self) -> usize {
        self.l.nrows()
    }

    pub fn l(&self) -> &DMatrix<f64> {
        &self.l
    }

    pub fn into_l(self) -> DMatrix<f64> {
        self.l
    }

    /// Wraps an existing lower-triangular factor without checking it.
    pub fn from_lower(l: DMatrix<f64>) -> Self {
        Self { l }
    }

    /// `log |A| = 2 Σ log Lᵢᵢ`.
    pub fn log_det(&self) -> f64 {
        2.0 * self.l.diagonal().iter().map(|d| d.ln()).sum::<f64>()
    }

    /// Solves `L x = b`.
    pub fn solve_lower_vec(&self, b: &DVector<f64>) -> DVector<f64> {
        let n = self.dim();
        let mut x = b.clone();
        for j in 0..n {
            let xj = x[j] / self.l[(j, j)];
            x[j] = xj;
            if xj != 0.0 {
                let col = self.l.column(j);
                for i in j + 1..n {
                    x[i] -= col[i] * xj;
                }
            }
        }
        x
    }

    /// Solves `Lᵀ x = b`.
    pub fn solve_upper_vec(&self, b: &DVector<f64>) -> DVector<f64> {
        let n = self.dim();
        let mut x = b.clone();
        for j in (0..n).rev() {
            let col = self.l.column(j);
            let mut s = x[j];
            for i in j + 1..n {
                s -= col[i] * x[i];
            }
            x[j] = s / self.l[(j, j)];
        }
        x
    }

    /// Solves `A x = b`.
    pub fn solve_vec(&self, b: &DVector<f64>) -> DVector<f64> {
        self.solve_upper_vec(&self.solve_lower_vec(b))
    }

    /// Solves `L X = B` for a matrix right-hand side.
    pub fn solve_lower(&self, b: &DMatrix<f64>) -> DMatrix<f64> {
        let n = self.dim();
        assert_eq!(b.nrows(), n);
        let mut x = b.clone();
        let mut r0 = 0;
        while r0 < n {
            let bs = BLOCK.min(n - r0);
            if r0 > 0 {
                let update = self.l.view((r0, 0), (bs, r0)) * x.rows(0, r0);
                let mut rows = x.rows_mut(r0, bs);
                rows -= update;
            }
            let inv = lower_inverse_small(&self.l.view((r0, r0), (bs, bs)).clone_owned());
            let solved = inv * x.rows(r0, bs);
            x.rows_mut(r0, bs).copy_from(&solved);
            r0 += bs;
        }
        x
    }

    /// Solves `Lᵀ X = B` for a matrix right-hand side.
    pub fn solve_upper(&self, b: &DMatrix<f64>) -> DMatrix<f64> {
        let n = self.dim();
        assert_eq!(b.nrows(), n);
        let mut x = b.clone();
        let mut end = n;
        while end > 0 {
            let bs = BLOCK.min(end);
            let r0 = end - bs;
            let below = n - end;
            if below > 0 {
                let lt = self.l.view((end, r0), (below, bs)).transpose();
                let update = lt * x.rows(end, below);
                let mut rows = x.rows_mut(r0, bs);
                rows -= update;
            }
            let inv_t = lower_inverse_small(&self.l.view((r0, r0), (bs, bs)).clone_owned())
                .transpose();
            let solved = inv_t * x.rows(r0, bs);
            x.rows_mut(r0, bs).copy_from(&solved);
            end = r0;
        }
        x
    }

    /// Solves `A X = B`.
    pub fn solve(&self, b: &DMatrix<f64>) -> DMatrix<f64> {
        self.solve_upper(&self.solve_lower(b))
    }

    /// `L⁻¹` (lower triangular). Skips the blocks known to be zero.
    pub fn inverse_lower(&self) -> DMatrix<f64> {
        let n = self.dim();
        let mut x = DMatrix::zeros(n, n);
        let mut r0 = 0;
        while r0 < n {
            let bs = BLOCK.min(n - r0);
            let mut rhs = DMatrix::zeros(bs, r0 + bs);
            rhs.view_mut((0, r0), (bs, bs)).fill_with_identity();
            if r0 > 0 {
                rhs.columns_mut(0, r0)
                    .gemm(-1.0, &self.l.view((r0, 0), (bs, r0)), &x.view((0, 0), (r0, r0)), 0.0);
            }
            let inv = lower_inverse_small(&self.l.view((r0, r0), (bs, bs)).clone_owned());
            x.view_mut((r0, 0), (bs, r0 + bs)).copy_from(&(inv * rhs));
            r0 += bs;
        }
        x
    }

    /// `A⁻¹ = L⁻ᵀ L⁻¹`, built block column by block column from the lower
    /// triangle and then mirrored.
    pub fn inverse(&self) -> DMatrix<f64> {
        let n = self.dim();
        let li = self.inverse_lower();
        let lit = li.transpose();
        let mut a = DMatrix::zeros(n, n);
        let mut c0 = 0;
        while c0 < n {
            let bs = BLOCK.min(n - c0);
            let m = n - c0;
            a.view_mut((c0, c0), (m, bs))
                .gemm(1.0, &lit.view((c0, c0), (m, m)), &li.view((c0, c0), (m, bs)), 0.0);
            c0 += bs;
        }
        a.fill_upper_triangle_with_lower_triangle();
        a
    }

    /// Reconstructs `L Lᵀ`.
    pub fn reconstruct(&self) -> DMatrix<f64> {
        &self.l * self.l.transpose()
    }
}

fn factor_diagonal_block(
    a: &mut DMatrix<f64>,
    k: usize,
    b: usize,
    diag: &[f64],
    tol: f64,
) -> Option<()> {
    for j in k..k + b {
        let mut d = a[(j, j)];
        for p in k..j {
            d -= a[(j, p)] * a[(j, p)];
        }
        if !d.is_finite() || d <= 0.0 || d <= tol * diag[j] {
            return None;
        }
        let ljj = d.sqrt();
        a[(j, j)] = ljj;
        for i in j + 1..k + b {
            let mut s = a[(i, j)];
            for p in k..j {
                s -= a[(i, p)] * a[(j, p)];
            }
            a[(i, j)] = s / ljj;
        }
    }
    Some(())
}

fn lower_inverse_small(l: &DMatrix<f64>) -> DMatrix<f64> {
    let b = l.nrows();
    let mut x = DMatrix::zeros(b, b);
    for j in 0..b {
        x[(j, j)] = 1.0 / l[(j, j)];
        for i in j + 1..b {
            let mut s = 0.0;
            for p in j..i {
                s += l[(i, p)] * x[(p, j)];
            }
            x[(i, j)] = -s / l[(i, i)];
        }
    }
    x
}

/// Sum of squares of each column.
pub fn column_sq_norms(m: &DMatrix<f64>) -> Vec<f64> {
    m.column_iter().map(|c| c.norm_squared()).collect()
}

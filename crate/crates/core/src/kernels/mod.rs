//! Covariance functions: base kernels, log-space hyperparameters with priors
//! and bounds, sum/product composition and the textual kernel DSL.
//!
//! Base forms, with `r² = Σ_d (Δ_d/ℓ_d)²`:
//!
//! | kind     | k(r)                                    |
//! |----------|-----------------------------------------|
//! | SE       | σ² exp(−r²/2)                           |
//! | Mat32    | σ² (1 + √3 r) exp(−√3 r)                |
//! | Mat52    | σ² (1 + √5 r + 5r²/3) exp(−√5 r)        |
//! | Periodic | σ² exp(−2 sin²(π|Δ|/p) / ℓ²)            |

mod base;
mod compiled;
mod expr;
mod hyper;
mod parse;

use nalgebra::DMatrix;
use thiserror::Error;

pub use base::{BaseKernel, KernelKind};
pub use compiled::CompiledKernel;
pub(crate) use compiled::Rows;
pub use expr::KernelExpr;
pub use hyper::{GaussianPrior, HyperParam};
pub use parse::parse_kernel_expr;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum KernelError {
    #[error("syntax error at offset {position}: {message}")]
    Syntax { position: usize, message: String },
    #[error("unknown feature '{0}'")]
    UnknownFeature(String),
    #[error("unknown kernel '{0}' (expected SE, Mat32, Mat52 or Periodic)")]
    UnknownKernel(String),
    #[error("{kernel} takes exactly {expected} feature(s), got {found}")]
    Arity { kernel: String, expected: usize, found: usize },
    #[error("feature '{0}' listed twice")]
    DuplicateFeature(String),
    #[error("kernel leaf has no features")]
    EmptyFeatures,
    #[error("input has {found} columns, kernel needs at least {expected}")]
    DimensionMismatch { expected: usize, found: usize },
    #[error("non-finite value in kernel input")]
    NonFiniteInput,
    #[error("invalid hyperparameter '{0}': must be finite and positive")]
    InvalidHyperparameter(String),
    #[error("parameter vector has length {found}, expected {expected}")]
    LengthMismatch { expected: usize, found: usize },
    #[error("unknown parameter '{0}'")]
    UnknownParameter(String),
}

pub(crate) fn check_inputs(expr: &KernelExpr, inputs: &[&DMatrix<f64>]) -> Result<(), KernelError> {
    for p in expr.params() {
        let v = p.value();
        if !(v.is_finite() && v > 0.0) {
            return Err(KernelError::InvalidHyperparameter(p.name.clone()));
        }
    }
    let needed = expr.columns().into_iter().max().map_or(0, |c| c + 1);
    for m in inputs {
        if m.ncols() < needed {
            return Err(KernelError::DimensionMismatch { expected: needed, found: m.ncols() });
        }
        if m.iter().any(|x| !x.is_finite()) {
            return Err(KernelError::NonFiniteInput);
        }
    }
    Ok(())
}

/// Covariance matrix `K(A, B)` with entry `(i, j) = k(aᵢ, bⱼ)`.
pub fn eval_kernel(
    expr: &KernelExpr,
    a: &DMatrix<f64>,
    b: &DMatrix<f64>,
) -> Result<DMatrix<f64>, KernelError> {
    check_inputs(expr, &[a, b])?;
    if a.ncols() != b.ncols() {
        return Err(KernelError::DimensionMismatch { expected: a.ncols(), found: b.ncols() });
    }
    let k = CompiledKernel::new(expr);
    if std::ptr::eq(a, b) {
        Ok(k.gram(a))
    } else {
        Ok(k.cross(a, b))
    }
}

/// `∂K(A,A)/∂u_p` for each log-space hyperparameter, in pack order.
pub fn kernel_gradients(expr: &KernelExpr, a: &DMatrix<f64>) -> Result<Vec<DMatrix<f64>>, KernelError> {
    check_inputs(expr, &[a])?;
    let k = CompiledKernel::new(expr);
    let rows = Rows::new(a);
    let n = a.nrows();
    let np = k.n_params();
    let mut out = vec![DMatrix::zeros(n, n); np];
    let mut g = vec![0.0; np];
    for j in 0..n {
        for i in j..n {
            k.value_and_grad(rows.row(i), rows.row(j), &mut g);
            for (m, &gp) in out.iter_mut().zip(&g) {
                m[(i, j)] = gp;
                m[(j, i)] = gp;
            }
        }
    }
    Ok(out)
}

/// Sum of log-space Gaussian priors over the kernel's hyperparameters.
pub fn log_prior(expr: &KernelExpr) -> f64 {
    expr.log_prior()
}

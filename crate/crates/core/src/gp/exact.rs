use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;

use super::{check_data, GpError, GpModel, PredictiveDistribution};
use crate::kernels::CompiledKernel;
use crate::linalg::{column_sq_norms, Cholesky};

const LN_2PI: f64 = 1.837_877_066_409_345_5;
const PREDICT_BLOCK: usize = 512;

/// Everything needed to evaluate the posterior: the factor of
/// `K + σ_n²I + δI` and `α = (K + σ_n²I + δI)⁻¹ (y − μ)`.
#[derive(Clone, Debug)]
pub struct PosteriorCache {
    pub chol: Cholesky,
    pub alpha: DVector<f64>,
    pub residual: DVector<f64>,
    pub train_inputs: DMatrix<f64>,
    pub train_targets: DVector<f64>,
    /// Absolute diagonal jitter `δ` that was added.
    pub jitter: f64,
}

impl PosteriorCache {
    pub fn n(&self) -> usize {
        self.alpha.len()
    }
}

/// Adds `σ_n²` and walks the jitter ladder until the matrix factorizes.
pub(crate) fn factor_with_ladder(
    mut k: DMatrix<f64>,
    noise: f64,
    ladder: &[f64],
) -> Result<(Cholesky, f64), GpError> {
    let n = k.nrows();
    let mean_diag = if n == 0 { 0.0 } else { k.diagonal().mean() };
    for i in 0..n {
        k[(i, i)] += noise;
    }
    let mut added = 0.0;
    for &rung in ladder {
        let jitter = rung * mean_diag;
        for i in 0..n {
            k[(i, i)] += jitter - added;
        }
        added = jitter;
        if let Some(c) = Cholesky::new(k.clone()) {
            return Ok((c, jitter));
        }
    }
    Err(GpError::NotPositiveDefinite(ladder.to_vec()))
}

/// Factorizes the training covariance and solves for `α`.
pub fn fit_cache(model: &GpModel, x: &DMatrix<f64>, y: &DVector<f64>) -> Result<PosteriorCache, GpError> {
    check_data(model, x, Some(y))?;
    if x.nrows() > model.max_exact {
        return Err(GpError::SizeCapExceeded { n: x.nrows(), cap: model.max_exact });
    }
    let kernel = CompiledKernel::new(&model.kernel);
    let (chol, jitter) = factor_with_ladder(kernel.gram(x), model.noise_variance(), &model.jitter_ladder)?;
    let residual = y - model.mean.eval(x);
    let alpha = chol.solve_vec(&residual);
    Ok(PosteriorCache {
        chol,
        alpha,
        residual,
        train_inputs: x.clone(),
        train_targets: y.clone(),
        jitter,
    })
}

/// `log p(y | X, θ) = −½ rᵀα − Σ log Lᵢᵢ − (n/2) log 2π`, with `r = y − μ`.
pub fn log_marginal_likelihood(cache: &PosteriorCache) -> f64 {
    let n = cache.n() as f64;
    -0.5 * cache.residual.dot(&cache.alpha) - 0.5 * cache.chol.log_det() - 0.5 * n * LN_2PI
}

/// Log marginal likelihood and its gradient with respect to the packed
/// parameter vector (kernel log-params, mean params, log noise).
///
/// Kernel and noise entries use `½ tr((ααᵀ − K⁻¹) ∂K/∂u)`.
pub fn lml_and_gradient(
    model: &GpModel,
    x: &DMatrix<f64>,
    y: &DVector<f64>,
) -> Result<(f64, Vec<f64>, PosteriorCache), GpError> {
    let cache = fit_cache(model, x, y)?;
    let lml = log_marginal_likelihood(&cache);
    let mut w = cache.chol.inverse();
    w.neg_mut();
    w.ger(1.0, &cache.alpha, &cache.alpha, 1.0);
    let kernel = CompiledKernel::new(&model.kernel);
    let mut grad: Vec<f64> = kernel.contract_gram(x, &w).into_iter().map(|g| 0.5 * g).collect();
    grad.extend(model.mean.grad_dot(x, &cache.alpha));
    grad.push(0.5 * w.trace() * model.noise_variance());
    Ok((lml, grad, cache))
}

pub fn lml_gradient(model: &GpModel, x: &DMatrix<f64>, y: &DVector<f64>) -> Result<Vec<f64>, GpError> {
    Ok(lml_and_gradient(model, x, y)?.1)
}

/// Posterior predictive marginals at `xs`.
///
/// Test points are processed in fixed-size blocks, so the result does not
/// depend on how many threads run them.
pub fn predict(model: &GpModel, cache: &PosteriorCache, xs: &DMatrix<f64>) -> Result<PredictiveDistribution, GpError> {
    if xs.ncols() != cache.train_inputs.ncols() {
        return Err(GpError::DimensionMismatch { expected: cache.train_inputs.ncols(), found: xs.ncols() });
    }
    if xs.nrows() == 0 {
        return Ok(PredictiveDistribution { mean: vec![], latent_var: vec![], obs_var: vec![], clamped: 0 });
    }
    check_data(model, xs, None)?;
    let kernel = CompiledKernel::new(&model.kernel);
    let m = xs.nrows();
    let starts: Vec<usize> = (0..m).step_by(PREDICT_BLOCK).collect();
    let blocks: Vec<(Vec<f64>, Vec<f64>)> = starts
        .par_iter()
        .map(|&s| {
            let b = PREDICT_BLOCK.min(m - s);
            let xb = xs.rows(s, b).clone_owned();
            let kxs = kernel.cross(&cache.train_inputs, &xb);
            let prior_mean = model.mean.eval(&xb);
            let mean: Vec<f64> = (0..b)
                .map(|j| kxs.column(j).dot(&cache.alpha) + prior_mean[j])
                .collect();
            let v = cache.chol.solve_lower(&kxs);
            let explained = column_sq_norms(&v);
            let prior = kernel.diag(&xb);
            let var = prior.iter().zip(&explained).map(|(p, e)| p - e).collect();
            (mean, var)
        })
        .collect();
    let noise = model.noise_variance();
    let mut out = PredictiveDistribution {
        mean: Vec::with_capacity(m),
        latent_var: Vec::with_capacity(m),
        obs_var: Vec::with_capacity(m),
        clamped: 0,
    };
    for (mean, var) in blocks {
        out.mean.extend(mean);
        for v in var {
            let v = if v < 0.0 {
                out.clamped += 1;
                0.0
            } else {
                v
            };
            out.latent_var.push(v);
            out.obs_var.push(v + noise);
        }
    }
    Ok(out)
}

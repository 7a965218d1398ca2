//! Exact Gaussian-process regression.
//!
//! `y = f(x) + ε`, `f ~ GP(μ, k)`, `ε ~ N(0, σ_n²)`. Training and prediction
//! go through a Cholesky factor of `K + σ_n²I + δI`, where `δ` is the first
//! rung of the jitter ladder (scaled by the mean of `diag K`) that factorizes.

mod cg;
mod exact;
mod sample;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::kernels::{HyperParam, KernelError, KernelExpr};

pub use cg::{solve_cg, solve_cg_model};
pub use exact::{fit_cache, lml_and_gradient, lml_gradient, log_marginal_likelihood, predict, PosteriorCache};
pub use sample::{generate_synthetic, sample, SyntheticDraw};
pub(crate) use exact::factor_with_ladder;

/// Jitter multipliers of `mean(diag K)` tried in order.
pub const DEFAULT_JITTER_LADDER: [f64; 4] = [0.0, 1e-8, 1e-6, 1e-4];

/// Largest training set an exact GP accepts by default.
pub const DEFAULT_MAX_EXACT: usize = 10_000;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum GpError {
    #[error(transparent)]
    Kernel(#[from] KernelError),
    #[error("covariance not positive definite after jitter ladder {0:?} (degenerate kernel or duplicated inputs with zero noise)")]
    NotPositiveDefinite(Vec<f64>),
    #[error("{n} training points exceed the exact-GP cap of {cap}; use experts or sparse mode")]
    SizeCapExceeded { n: usize, cap: usize },
    #[error("no training data")]
    EmptyData,
    #[error("dimension mismatch: expected {expected}, found {found}")]
    DimensionMismatch { expected: usize, found: usize },
    #[error("non-finite value in data")]
    NonFiniteData,
    #[error("conjugate gradient did not converge within {0} iterations")]
    NoConvergence(usize),
}

/// Prior mean function `μ(x)`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum MeanFunction {
    Zero,
    Constant { value: f64, learnable: bool },
    Linear { weights: Vec<f64>, intercept: f64, learnable: bool },
}

impl Default for MeanFunction {
    fn default() -> Self {
        MeanFunction::Zero
    }
}

impl MeanFunction {
    pub fn n_params(&self) -> usize {
        match self {
            MeanFunction::Zero => 0,
            MeanFunction::Constant { .. } => 1,
            MeanFunction::Linear { weights, .. } => weights.len() + 1,
        }
    }

    pub fn learnable(&self) -> bool {
        match self {
            MeanFunction::Zero => false,
            MeanFunction::Constant { learnable, .. } | MeanFunction::Linear { learnable, .. } => *learnable,
        }
    }

    pub fn params(&self) -> Vec<f64> {
        match self {
            MeanFunction::Zero => vec![],
            MeanFunction::Constant { value, .. } => vec![*value],
            MeanFunction::Linear { weights, intercept, .. } => {
                weights.iter().copied().chain(std::iter::once(*intercept)).collect()
            }
        }
    }

    pub fn set_params(&mut self, v: &[f64]) {
        match self {
            MeanFunction::Zero => {}
            MeanFunction::Constant { value, .. } => *value = v[0],
            MeanFunction::Linear { weights, intercept, .. } => {
                let d = weights.len();
                weights.copy_from_slice(&v[..d]);
                *intercept = v[d];
            }
        }
    }

    pub fn param_names(&self) -> Vec<String> {
        match self {
            MeanFunction::Zero => vec![],
            MeanFunction::Constant { .. } => vec!["mean.constant".into()],
            MeanFunction::Linear { weights, .. } => (0..weights.len())
                .map(|d| format!("mean.weight.{d}"))
                .chain(std::iter::once("mean.intercept".into()))
                .collect(),
        }
    }

    pub fn check_width(&self, d: usize) -> Result<(), GpError> {
        match self {
            MeanFunction::Linear { weights, .. } if weights.len() != d => {
                Err(GpError::DimensionMismatch { expected: weights.len(), found: d })
            }
            _ => Ok(()),
        }
    }

    pub fn eval(&self, x: &DMatrix<f64>) -> DVector<f64> {
        match self {
            MeanFunction::Zero => DVector::zeros(x.nrows()),
            MeanFunction::Constant { value, .. } => DVector::from_element(x.nrows(), *value),
            MeanFunction::Linear { weights, intercept, .. } => {
                DVector::from_fn(x.nrows(), |i, _| {
                    intercept + weights.iter().enumerate().map(|(d, w)| w * x[(i, d)]).sum::<f64>()
                })
            }
        }
    }

    /// `(∂μ/∂θ)ᵀ v` for each mean parameter.
    pub fn grad_dot(&self, x: &DMatrix<f64>, v: &DVector<f64>) -> Vec<f64> {
        match self {
            MeanFunction::Zero => vec![],
            MeanFunction::Constant { .. } => vec![v.sum()],
            MeanFunction::Linear { weights, .. } => {
                let mut g: Vec<f64> = (0..weights.len()).map(|d| x.column(d).dot(v)).collect();
                g.push(v.sum());
                g
            }
        }
    }
}

/// Role of a packed parameter, used for initialization and restarts.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ParamRole {
    Variance,
    Lengthscale,
    Period,
    Mean,
    Noise,
}

/// Mean, kernel and Gaussian noise.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GpModel {
    #[serde(default)]
    pub mean: MeanFunction,
    pub kernel: KernelExpr,
    /// Observation noise variance `σ_n²`.
    pub noise: HyperParam,
    #[serde(default = "default_ladder")]
    pub jitter_ladder: Vec<f64>,
    #[serde(default = "default_cap")]
    pub max_exact: usize,
}

fn default_ladder() -> Vec<f64> {
    DEFAULT_JITTER_LADDER.to_vec()
}

fn default_cap() -> usize {
    DEFAULT_MAX_EXACT
}

impl GpModel {
    pub fn new(kernel: KernelExpr, noise_variance: f64) -> Self {
        Self {
            mean: MeanFunction::Zero,
            kernel,
            noise: HyperParam::new("noise", noise_variance),
            jitter_ladder: default_ladder(),
            max_exact: DEFAULT_MAX_EXACT,
        }
    }

    pub fn with_mean(mut self, mean: MeanFunction) -> Self {
        self.mean = mean;
        self
    }

    pub fn noise_variance(&self) -> f64 {
        self.noise.value()
    }

    /// Total length of the packed parameter vector: kernel, mean, noise.
    pub fn n_params(&self) -> usize {
        self.kernel.n_params() + self.mean.n_params() + 1
    }

    pub fn pack(&self) -> Vec<f64> {
        let mut v = self.kernel.pack_params();
        v.extend(self.mean.params());
        v.push(self.noise.unconstrained());
        v
    }

    pub fn unpack(&mut self, v: &[f64]) -> Result<(), KernelError> {
        let expected = self.n_params();
        if v.len() != expected {
            return Err(KernelError::LengthMismatch { expected, found: v.len() });
        }
        let nk = self.kernel.n_params();
        let nm = self.mean.n_params();
        self.kernel.unpack_params(&v[..nk])?;
        self.mean.set_params(&v[nk..nk + nm]);
        self.noise.set_unconstrained(v[nk + nm]);
        Ok(())
    }

    pub fn param_names(&self) -> Vec<String> {
        let mut names = self.kernel.param_names();
        names.extend(self.mean.param_names());
        names.push(self.noise.name.clone());
        names
    }

    pub fn roles(&self) -> Vec<ParamRole> {
        let mut roles = Vec::with_capacity(self.n_params());
        for leaf in self.kernel.leaves() {
            roles.push(ParamRole::Variance);
            roles.extend(std::iter::repeat_n(ParamRole::Lengthscale, leaf.lengthscales.len()));
            if leaf.period.is_some() {
                roles.push(ParamRole::Period);
            }
        }
        roles.extend(std::iter::repeat_n(ParamRole::Mean, self.mean.n_params()));
        roles.push(ParamRole::Noise);
        roles
    }

    pub fn learnable_mask(&self) -> Vec<bool> {
        let mut m: Vec<bool> = self.kernel.params().iter().map(|p| p.learnable).collect();
        m.extend(std::iter::repeat_n(self.mean.learnable(), self.mean.n_params()));
        m.push(self.noise.learnable);
        m
    }

    /// Number of learnable hyperparameters (used for BIC).
    pub fn n_learnable(&self) -> usize {
        self.learnable_mask().iter().filter(|&&b| b).count()
    }

    /// Per-parameter bounds in packed (log) space.
    pub fn bounds(&self) -> Vec<Option<(f64, f64)>> {
        let mut b: Vec<_> = self.kernel.params().iter().map(|p| p.unconstrained_bounds()).collect();
        b.extend(std::iter::repeat_n(None, self.mean.n_params()));
        b.push(self.noise.unconstrained_bounds());
        b
    }

    pub fn log_prior(&self) -> f64 {
        self.kernel.log_prior() + self.noise.log_prior()
    }

    pub fn log_prior_grad(&self) -> Vec<f64> {
        let mut g = self.kernel.log_prior_grad();
        g.extend(std::iter::repeat_n(0.0, self.mean.n_params()));
        g.push(self.noise.log_prior_grad());
        g
    }

    /// Named constrained-space values (kernel and noise) plus raw mean values.
    pub fn named_values(&self) -> Vec<(String, f64)> {
        let mut out: Vec<(String, f64)> =
            self.kernel.params().iter().map(|p| (p.name.clone(), p.value())).collect();
        out.extend(self.mean.param_names().into_iter().zip(self.mean.params()));
        out.push((self.noise.name.clone(), self.noise.value()));
        out
    }
}

/// Gaussian predictive marginals at a set of test inputs.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PredictiveDistribution {
    pub mean: Vec<f64>,
    /// Variance of the latent function `f*`.
    pub latent_var: Vec<f64>,
    /// `latent_var + σ_n²`.
    pub obs_var: Vec<f64>,
    /// Number of latent variances clamped up to zero.
    #[serde(default)]
    pub clamped: usize,
}

impl PredictiveDistribution {
    pub fn len(&self) -> usize {
        self.mean.len()
    }

    pub fn is_empty(&self) -> bool {
        self.mean.is_empty()
    }

    pub fn obs_std(&self) -> Vec<f64> {
        self.obs_var.iter().map(|v| v.sqrt()).collect()
    }

    pub fn latent_std(&self) -> Vec<f64> {
        self.latent_var.iter().map(|v| v.sqrt()).collect()
    }
}

pub(crate) fn check_data(model: &GpModel, x: &DMatrix<f64>, y: Option<&DVector<f64>>) -> Result<(), GpError> {
    if x.nrows() == 0 {
        return Err(GpError::EmptyData);
    }
    if let Some(y) = y {
        if y.len() != x.nrows() {
            return Err(GpError::DimensionMismatch { expected: x.nrows(), found: y.len() });
        }
        if y.iter().any(|v| !v.is_finite()) {
            return Err(GpError::NonFiniteData);
        }
    }
    if x.iter().any(|v| !v.is_finite()) {
        return Err(GpError::NonFiniteData);
    }
    model.mean.check_width(x.ncols())?;
    crate::kernels::check_inputs(&model.kernel, &[x])?;
    Ok(())
}

use nalgebra::{DMatrix, DVector};
use rand::seq::index::sample as sample_indices;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::ScaleError;
use crate::data::kmeans;
use crate::gp::{check_data, factor_with_ladder, GpModel, PredictiveDistribution};
use crate::kernels::{CompiledKernel, KernelError};
use crate::linalg::{column_sq_norms, Cholesky};
use crate::train::{maximize, model_problem, Problem, TrainConfig, TrainError, TrainTrace};

const LN_2PI: f64 = 1.837_877_066_409_345_5;
const PREDICT_BLOCK: usize = 512;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SvgpOptions {
    /// Number of inducing points `m`.
    pub inducing: usize,
    /// Optimize the inducing locations along with the hyperparameters.
    pub learn_inducing: bool,
    /// Lloyd iterations for the k-means placement of the initial inducing points.
    pub kmeans_iters: usize,
    pub seed: u64,
}

impl Default for SvgpOptions {
    fn default() -> Self {
        Self { inducing: 1000, learn_inducing: true, kmeans_iters: 20, seed: 0 }
    }
}

/// Sparse GP under the collapsed variational bound, conditioned on its
/// training data through `m` inducing points.
#[derive(Clone, Debug)]
pub struct SparseGp {
    pub model: GpModel,
    pub z: DMatrix<f64>,
    pub train_inputs: DMatrix<f64>,
    pub train_targets: DVector<f64>,
    /// `Kmm + δI = Lm Lmᵀ`.
    lm: Cholesky,
    /// `I + AAᵀ = Lb Lbᵀ` with `A = Lm⁻¹ Kmn / σ`.
    lb: Cholesky,
    c: DVector<f64>,
    pub jitter: f64,
    pub bound: f64,
}

struct Parts {
    bound: f64,
    lm: Cholesky,
    lb: Cholesky,
    a: DMatrix<f64>,
    c: DVector<f64>,
    r: DVector<f64>,
    jitter: f64,
    sigma2: f64,
    tr_knn: f64,
    tr_aat: f64,
}

fn check_noise(model: &GpModel) -> Result<f64, ScaleError> {
    let s2 = model.noise_variance();
    if s2 > 0.0 && s2.is_finite() {
        Ok(s2)
    } else {
        Err(KernelError::InvalidHyperparameter(model.noise.name.clone()).into())
    }
}

fn parts(model: &GpModel, z: &DMatrix<f64>, x: &DMatrix<f64>, y: &DVector<f64>) -> Result<Parts, ScaleError> {
    check_data(model, x, Some(y))?;
    check_data(model, z, None)?;
    let (m, n) = (z.nrows(), x.nrows());
    if m > n {
        return Err(ScaleError::TooManyInducing { m, n });
    }
    let sigma2 = check_noise(model)?;
    let sigma = sigma2.sqrt();
    let kernel = CompiledKernel::new(&model.kernel);
    let (lm, jitter) = factor_with_ladder(kernel.gram(z), 0.0, &model.jitter_ladder)?;
    let a = lm.solve_lower(&kernel.cross(z, x)) / sigma;
    let mut b = DMatrix::identity(m, m);
    b.gemm(1.0, &a, &a.transpose(), 1.0);
    let lb = Cholesky::new(b).ok_or_else(|| crate::gp::GpError::NotPositiveDefinite(model.jitter_ladder.clone()))?;
    let r = y - model.mean.eval(x);
    let c = lb.solve_lower_vec(&(&a * &r)) / sigma;
    let tr_knn: f64 = kernel.diag(x).iter().sum();
    let tr_aat = a.norm_squared();
    let nf = n as f64;
    let bound = -0.5 * nf * LN_2PI - 0.5 * lb.log_det() - 0.5 * nf * sigma2.ln() - 0.5 * r.norm_squared() / sigma2
        + 0.5 * c.norm_squared()
        - 0.5 * tr_knn / sigma2
        + 0.5 * tr_aat;
    Ok(Parts { bound, lm, lb, a, c, r, jitter, sigma2, tr_knn, tr_aat })
}

/// Collapsed variational lower bound
/// `log N(y | μ, Qnn + σ²I) − tr(Knn − Qnn)/(2σ²)`, `Qnn = Knm Kmm⁻¹ Kmn`,
/// evaluated in `O(nm²)`.
pub fn collapsed_bound(model: &GpModel, z: &DMatrix<f64>, x: &DMatrix<f64>, y: &DVector<f64>) -> Result<f64, ScaleError> {
    Ok(parts(model, z, x, y)?.bound)
}

/// The bound, its gradient with respect to the model's packed parameters,
/// and its gradient with respect to the inducing inputs (m×D).
pub fn collapsed_bound_and_gradient(
    model: &GpModel,
    z: &DMatrix<f64>,
    x: &DMatrix<f64>,
    y: &DVector<f64>,
) -> Result<(f64, Vec<f64>, DMatrix<f64>), ScaleError> {
    let p = parts(model, z, x, y)?;
    let (m, n) = (z.nrows(), x.nrows());
    let sigma = p.sigma2.sqrt();
    let kernel = CompiledKernel::new(&model.kernel);

    // β = Σ⁻¹ r and v = Kmm⁻¹ Kmn β
    let binv_ar = p.lb.solve_upper_vec(&(&p.c * sigma));
    let beta = (&p.r - p.a.tr_mul(&binv_ar)) / p.sigma2;
    let v = p.lm.solve_upper_vec(&(&p.a * &beta)) * sigma;

    let binv = p.lb.inverse();
    let mut e = -binv.clone();
    for i in 0..m {
        e[(i, i)] += 1.0;
    }
    // ∂F/∂Kmn = v βᵀ + σ⁻¹ Lm⁻ᵀ (I − B⁻¹) A
    let mut g_mn = p.lm.solve_upper(&e) * &p.a / sigma;
    g_mn.ger(1.0, &v, &beta, 1.0);
    // ∂F/∂Kmm = −½ v vᵀ + ½ Lm⁻ᵀ (2I − B⁻¹ − B) Lm⁻¹
    let mut h = -binv.clone();
    h.gemm(-1.0, &p.a, &p.a.transpose(), 1.0);
    for i in 0..m {
        h[(i, i)] += 1.0;
    }
    let half = p.lm.solve_upper(&h);
    let mut g_mm = p.lm.solve_upper(&half.transpose()) * 0.5;
    g_mm.ger(-0.5, &v, &v, 1.0);
    g_mm = (&g_mm + g_mm.transpose()) * 0.5;

    let nf = n as f64;
    let tr_w = beta.norm_squared() - (nf - m as f64 + binv.trace()) / p.sigma2;
    let d_sigma2 = 0.5 * tr_w + (p.tr_knn - p.sigma2 * p.tr_aat) / (2.0 * p.sigma2 * p.sigma2);

    let mut grad = kernel.contract_cross(z, x, &g_mn);
    let from_mm = kernel.contract_gram(z, &g_mm);
    let from_diag = kernel.contract_diag(x, &vec![-0.5 / p.sigma2; n]);
    for ((g, a), b) in grad.iter_mut().zip(from_mm).zip(from_diag) {
        *g += a + b;
    }
    grad.extend(model.mean.grad_dot(x, &beta));
    grad.push(d_sigma2 * p.sigma2);

    let mut gz = kernel.contract_input_grad(z, x, &g_mn);
    gz += kernel.contract_input_grad(z, z, &g_mm) * 2.0;
    Ok((p.bound, grad, gz))
}

/// Initial inducing inputs: k-means centroids of `x`, topped up with random
/// training rows if clusters came out empty.
pub fn init_inducing(x: &DMatrix<f64>, m: usize, iters: usize, seed: u64) -> Result<DMatrix<f64>, ScaleError> {
    let n = x.nrows();
    if m > n {
        return Err(ScaleError::TooManyInducing { m, n });
    }
    let centroids = match kmeans(x, m, iters, seed) {
        Ok(r) => r.centroids,
        Err(_) => DMatrix::zeros(0, x.ncols()),
    };
    if centroids.nrows() == m {
        return Ok(centroids);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut rows: Vec<usize> = sample_indices(&mut rng, n, m - centroids.nrows()).into_vec();
    rows.sort_unstable();
    let extra = x.select_rows(&rows);
    let mut z = DMatrix::zeros(m, x.ncols());
    z.rows_mut(0, centroids.nrows()).copy_from(&centroids);
    z.rows_mut(centroids.nrows(), extra.nrows()).copy_from(&extra);
    Ok(z)
}

fn unpack_all(model: &GpModel, u: &[f64], m: usize) -> Result<(GpModel, DMatrix<f64>), KernelError> {
    let k = model.n_params();
    let mut fitted = model.clone();
    fitted.unpack(&u[..k])?;
    let d = (u.len() - k) / m.max(1);
    Ok((fitted, DMatrix::from_row_slice(m, d, &u[k..])))
}

/// Maximizes the collapsed bound plus the log prior over hyperparameters,
/// noise and (optionally) the inducing inputs, then conditions on `(x, y)`.
pub fn svgp_fit(
    model: &GpModel,
    x: &DMatrix<f64>,
    y: &DVector<f64>,
    z0: &DMatrix<f64>,
    cfg: &TrainConfig,
    learn_inducing: bool,
) -> Result<(SparseGp, TrainTrace), ScaleError> {
    let m = z0.nrows();
    if m > x.nrows() {
        return Err(ScaleError::TooManyInducing { m, n: x.nrows() });
    }
    let base = model_problem(model);
    let nz = z0.len();
    let mut start = base.start.clone();
    start.extend(z0.transpose().iter());
    let problem = Problem {
        start,
        learnable: base.learnable.iter().copied().chain(std::iter::repeat_n(learn_inducing, nz)).collect(),
        jitter: base.jitter.iter().copied().chain(std::iter::repeat_n(false, nz)).collect(),
        bounds: base.bounds.iter().copied().chain(std::iter::repeat_n(None, nz)).collect(),
    };
    let eval = |u: &[f64]| -> Result<(f64, Vec<f64>), TrainError> {
        let (mm, z) = unpack_all(model, u, m)?;
        let (f, mut g, gz) = collapsed_bound_and_gradient(&mm, &z, x, y).map_err(|e| match e {
            ScaleError::Gp(g) => TrainError::Gp(g),
            ScaleError::Kernel(k) => TrainError::Kernel(k),
            _ => TrainError::NonFiniteObjective,
        })?;
        let f = f + mm.log_prior();
        g.iter_mut().zip(mm.log_prior_grad()).for_each(|(a, b)| *a += b);
        g.extend(gz.transpose().iter());
        if f.is_finite() {
            Ok((f, g))
        } else {
            Err(TrainError::NonFiniteObjective)
        }
    };
    let mut trace = maximize(eval, &problem, cfg)?;
    let (mut fitted, z) = unpack_all(model, &trace.params, m)?;
    fitted.kernel.project();
    fitted.noise.project();
    trace.theta = fitted.named_values();
    Ok((SparseGp::condition(fitted, z, x, y)?, trace))
}

impl SparseGp {
    /// Builds the posterior summary for fixed hyperparameters and inducing inputs.
    pub fn condition(model: GpModel, z: DMatrix<f64>, x: &DMatrix<f64>, y: &DVector<f64>) -> Result<Self, ScaleError> {
        let p = parts(&model, &z, x, y)?;
        Ok(Self {
            model,
            z,
            train_inputs: x.clone(),
            train_targets: y.clone(),
            lm: p.lm,
            lb: p.lb,
            c: p.c,
            jitter: p.jitter,
            bound: p.bound,
        })
    }

    pub fn n_inducing(&self) -> usize {
        self.z.nrows()
    }

    /// Predictive marginals through the inducing points:
    /// mean `t₂ᵀc + μ`, latent variance `k** − ‖t₁‖² + ‖t₂‖²` with
    /// `t₁ = Lm⁻¹ Km*` and `t₂ = Lb⁻¹ t₁`.
    pub fn predict(&self, xs: &DMatrix<f64>) -> Result<PredictiveDistribution, ScaleError> {
        if xs.ncols() != self.z.ncols() {
            return Err(crate::gp::GpError::DimensionMismatch { expected: self.z.ncols(), found: xs.ncols() }.into());
        }
        let m = xs.nrows();
        let mut out = PredictiveDistribution { mean: Vec::with_capacity(m), latent_var: Vec::with_capacity(m), obs_var: Vec::with_capacity(m), clamped: 0 };
        if m == 0 {
            return Ok(out);
        }
        check_data(&self.model, xs, None)?;
        let kernel = CompiledKernel::new(&self.model.kernel);
        let starts: Vec<usize> = (0..m).step_by(PREDICT_BLOCK).collect();
        let blocks: Vec<(Vec<f64>, Vec<f64>)> = starts
            .par_iter()
            .map(|&s| {
                let b = PREDICT_BLOCK.min(m - s);
                let xb = xs.rows(s, b).clone_owned();
                let t1 = self.lm.solve_lower(&kernel.cross(&self.z, &xb));
                let t2 = self.lb.solve_lower(&t1);
                let prior_mean = self.model.mean.eval(&xb);
                let mean = (0..b).map(|j| t2.column(j).dot(&self.c) + prior_mean[j]).collect();
                let (n1, n2) = (column_sq_norms(&t1), column_sq_norms(&t2));
                let var = kernel.diag(&xb).iter().zip(n1.iter().zip(&n2)).map(|(k, (a, b))| k - a + b).collect();
                (mean, var)
            })
            .collect();
        let noise = self.model.noise_variance();
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
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gp::{fit_cache, log_marginal_likelihood, predict, MeanFunction};
    use crate::kernels::parse_kernel_expr;
    use rand::Rng;

    fn model(text: &str, noise: f64, rng: &mut ChaCha8Rng) -> GpModel {
        let s: Vec<String> = vec!["a".into(), "b".into()];
        let mut k = parse_kernel_expr(text, &s).unwrap();
        for p in k.params_mut() {
            p.set_unconstrained(rng.random_range(-0.5..0.5));
        }
        GpModel::new(k, noise)
    }

    fn data(n: usize, rng: &mut ChaCha8Rng) -> (DMatrix<f64>, DVector<f64>) {
        let x: DMatrix<f64> = DMatrix::from_fn(n, 2, |_, _| rng.random_range(-3.0..3.0));
        let y = DVector::from_fn(n, |i, _| x[(i, 0)].sin() + 0.3 * x[(i, 1)] + rng.random_range(-0.1..0.1));
        (x, y)
    }

    #[test]
    fn inducing_equal_to_data_is_exact() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let m = model("Mat52(a,b)", 0.1, &mut rng);
        let (x, y) = data(200, &mut rng);
        let exact = log_marginal_likelihood(&fit_cache(&m, &x, &y).unwrap());
        let f = collapsed_bound(&m, &x, &x, &y).unwrap();
        assert!((f - exact).abs() < 1e-6, "{f} vs {exact}");
        let sgp = SparseGp::condition(m.clone(), x.clone(), &x, &y).unwrap();
        let xs = DMatrix::from_fn(50, 2, |_, _| rng.random_range(-4.0..4.0));
        let a = sgp.predict(&xs).unwrap();
        let b = predict(&m, &fit_cache(&m, &x, &y).unwrap(), &xs).unwrap();
        for i in 0..50 {
            assert!((a.mean[i] - b.mean[i]).abs() < 1e-6);
            assert!((a.latent_var[i] - b.latent_var[i]).abs() < 1e-6);
        }
    }

    #[test]
    fn bound_below_exact_and_grows_with_nested_inducing_sets() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for _ in 0..10 {
            let m = model("SE(a,b) + Mat32(b)", rng.random_range(0.01..0.5), &mut rng);
            let (x, y) = data(150, &mut rng);
            let exact = log_marginal_likelihood(&fit_cache(&m, &x, &y).unwrap());
            let z = DMatrix::from_fn(40, 2, |_, _| rng.random_range(-3.0..3.0));
            let mut last = f64::NEG_INFINITY;
            for k in [5, 10, 20, 40] {
                let f = collapsed_bound(&m, &z.rows(0, k).clone_owned(), &x, &y).unwrap();
                assert!(f <= exact + 1e-6);
                assert!(f >= last - 1e-8);
                last = f;
            }
        }
    }

    #[test]
    fn gradients_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut m = model("Mat32(a,b) + SE(b)", 0.2, &mut rng);
        m = m.with_mean(MeanFunction::Constant { value: 0.3, learnable: true });
        let (x, y) = data(40, &mut rng);
        let z = DMatrix::from_fn(8, 2, |_, _| rng.random_range(-3.0..3.0));
        let (_, g, gz) = collapsed_bound_and_gradient(&m, &z, &x, &y).unwrap();
        let h = 1e-6;
        let u0 = m.pack();
        for i in 0..u0.len() {
            let at = |d: f64| {
                let mut mm = m.clone();
                let mut u = u0.clone();
                u[i] += d;
                mm.unpack(&u).unwrap();
                collapsed_bound(&mm, &z, &x, &y).unwrap()
            };
            let fd = (at(h) - at(-h)) / (2.0 * h);
            assert!((fd - g[i]).abs() <= 1e-5 * fd.abs().max(1e-2), "param {i}: {fd} vs {}", g[i]);
        }
        for a in 0..8 {
            for d in 0..2 {
                let at = |s: f64| {
                    let mut zz = z.clone();
                    zz[(a, d)] += s;
                    collapsed_bound(&m, &zz, &x, &y).unwrap()
                };
                let fd = (at(h) - at(-h)) / (2.0 * h);
                assert!((fd - gz[(a, d)]).abs() <= 1e-5 * fd.abs().max(1e-2), "z[{a},{d}]: {fd} vs {}", gz[(a, d)]);
            }
        }
    }

    #[test]
    fn fitting_raises_the_bound() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let m = model("SE(a,b)", 0.3, &mut rng);
        let (x, y) = data(200, &mut rng);
        let z0 = init_inducing(&x, 15, 20, 0).unwrap();
        let before = collapsed_bound(&m, &z0, &x, &y).unwrap();
        let cfg = TrainConfig { epochs: 60, restarts: 1, learning_rate: 0.05, ..Default::default() };
        let (sgp, trace) = svgp_fit(&m, &x, &y, &z0, &cfg, true).unwrap();
        assert!(sgp.bound > before + 1.0);
        assert_eq!(trace.objective.len(), 61);
        assert!(sgp.z != z0);
        let far = DMatrix::from_element(1, 2, 1e3);
        let p = sgp.predict(&far).unwrap();
        let prior = CompiledKernel::new(&sgp.model.kernel).diag(&far)[0];
        assert!((p.latent_var[0] - prior).abs() < 1e-6);
    }

    #[test]
    fn inducing_init_and_errors() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let (x, y) = data(30, &mut rng);
        let z = init_inducing(&x, 30, 10, 1).unwrap();
        assert_eq!(z.nrows(), 30);
        assert!(matches!(init_inducing(&x, 31, 10, 1), Err(ScaleError::TooManyInducing { .. })));
        let dup = DMatrix::from_element(10, 2, 1.0);
        assert_eq!(init_inducing(&dup, 4, 10, 0).unwrap().nrows(), 4);
        let m = model("SE(a,b)", 0.0, &mut rng);
        assert!(matches!(collapsed_bound(&m, &z.rows(0, 5).clone_owned(), &x, &y), Err(ScaleError::Kernel(_))));
    }
}

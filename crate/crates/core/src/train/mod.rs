//! Hyperparameter learning: penalized marginal-likelihood ascent with Adam,
//! data-driven initialization, finite-difference gradient checks and the
//! synthetic-data self-check.
//!
//! The objective `LML(θ) + log p(θ)` is maximized directly; gradients are
//! taken with respect to the packed log-space parameter vector.

mod adam;
mod check;
mod init;

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::PathBuf;

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::gp::{lml_and_gradient, GpError, GpModel, ParamRole};
use crate::kernels::KernelError;

pub use adam::{adam, Adam, AdamRun};
pub use check::{
    check_gradients, check_gradients_with, self_check, GradientCheck, GradientReport, SelfCheckReport,
    FD_STEP, GRAD_FLAG_TOL,
};
pub use init::{initialize_hyperparams, median_pairwise_distance};

#[derive(Debug, Clone, PartialEq, Error)]
pub enum TrainError {
    #[error(transparent)]
    Gp(#[from] GpError),
    #[error(transparent)]
    Kernel(#[from] KernelError),
    #[error("objective is not finite at the initial point, even after re-jittering")]
    NonFiniteObjective,
    #[error("degenerate data: {0}")]
    DegenerateData(String),
    #[error("invalid training config: {0}")]
    InvalidConfig(String),
    #[error("cannot write training log: {0}")]
    Io(String),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum Optimizer {
    #[default]
    Adam,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub optimizer: Optimizer,
    pub learning_rate: f64,
    pub epochs: usize,
    pub restarts: usize,
    pub seed: u64,
    /// Early stop once `‖grad‖∞` falls below this.
    pub grad_tol: f64,
    pub log_every: usize,
    /// Line-delimited JSON trace destination.
    pub log_path: Option<PathBuf>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            optimizer: Optimizer::Adam,
            learning_rate: 0.01,
            epochs: 150,
            restarts: 3,
            seed: 0,
            grad_tol: 1e-6,
            log_every: 1,
            log_path: None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), TrainError> {
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(TrainError::InvalidConfig("learning_rate must be positive".into()));
        }
        if self.restarts == 0 {
            return Err(TrainError::InvalidConfig("restarts must be at least 1".into()));
        }
        if !(self.grad_tol >= 0.0) {
            return Err(TrainError::InvalidConfig("grad_tol must be non-negative".into()));
        }
        Ok(())
    }

    fn adam(&self) -> Adam {
        Adam { learning_rate: self.learning_rate, epochs: self.epochs, grad_tol: self.grad_tol }
    }
}

/// Outcome of a (multi-restart) optimization.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainTrace {
    /// Objective per epoch of the winning restart, starting point first.
    pub objective: Vec<f64>,
    pub grad_norm: Vec<f64>,
    /// Best packed (log-space) parameter vector.
    pub params: Vec<f64>,
    /// Constrained-space values of the best parameters, by name.
    pub theta: Vec<(String, f64)>,
    pub converged: bool,
    pub best_restart: usize,
    pub best_objective: f64,
    /// Best objective of every restart that ran (`None` if it failed).
    pub restart_objectives: Vec<Option<f64>>,
}

impl TrainTrace {
    pub fn initial_objective(&self) -> f64 {
        self.objective[0]
    }
}

/// Description of a packed parameter vector to optimize.
#[derive(Clone, Debug)]
pub struct Problem {
    pub start: Vec<f64>,
    pub learnable: Vec<bool>,
    /// Entries perturbed by ×[1/3, 3] log-uniform jitter on restarts after the first.
    pub jitter: Vec<bool>,
    pub bounds: Vec<Option<(f64, f64)>>,
}

const INIT_ATTEMPTS: usize = 5;

fn jitter_entries(u: &mut [f64], which: &[bool], bounds: &[Option<(f64, f64)>], rng: &mut ChaCha8Rng) {
    let half = 3f64.ln();
    for i in 0..u.len() {
        if which[i] && u[i].is_finite() {
            u[i] += rng.random_range(-half..half);
            if let Some((lo, hi)) = bounds[i] {
                u[i] = u[i].clamp(lo, hi);
            }
        }
    }
}

fn run_restart<F>(eval: &F, problem: &Problem, cfg: &TrainConfig, restart: usize) -> Result<AdamRun, TrainError>
where
    F: Fn(&[f64]) -> Result<(f64, Vec<f64>), TrainError> + Sync,
{
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    rng.set_stream(restart as u64);
    let mut start = problem.start.clone();
    if restart > 0 {
        jitter_entries(&mut start, &problem.jitter, &problem.bounds, &mut rng);
    }
    let mut attempt = 0;
    let first = loop {
        match eval(&start) {
            Ok((f, g)) if f.is_finite() && g.iter().all(|v| v.is_finite()) => break (f, g),
            Ok(_) | Err(TrainError::NonFiniteObjective) => {
                attempt += 1;
                if attempt >= INIT_ATTEMPTS {
                    return Err(TrainError::NonFiniteObjective);
                }
                jitter_entries(&mut start, &problem.learnable, &problem.bounds, &mut rng);
            }
            Err(e) => return Err(e),
        }
    };
    Ok(adam(
        cfg.adam(),
        |u: &[f64]| eval(u).ok(),
        start,
        first,
        &problem.learnable,
        &problem.bounds,
    ))
}

/// Runs `cfg.restarts` independent Adam ascents of `eval` in parallel and
/// keeps the best; ties go to the lowest restart index.
///
/// `theta` in the returned trace is left empty for the caller to fill.
pub fn maximize<F>(eval: F, problem: &Problem, cfg: &TrainConfig) -> Result<TrainTrace, TrainError>
where
    F: Fn(&[f64]) -> Result<(f64, Vec<f64>), TrainError> + Sync,
{
    cfg.validate()?;
    let runs: Vec<Result<AdamRun, TrainError>> = (0..cfg.restarts)
        .into_par_iter()
        .map(|r| run_restart(&eval, problem, cfg, r))
        .collect();
    if let Some(path) = &cfg.log_path {
        write_log(path, &runs, cfg.log_every.max(1))?;
    }
    let mut best: Option<(usize, &AdamRun)> = None;
    for (r, run) in runs.iter().enumerate() {
        if let Ok(run) = run {
            if best.is_none_or(|(_, b)| run.best_objective > b.best_objective) {
                best = Some((r, run));
            }
        }
    }
    let Some((best_restart, run)) = best else {
        return Err(runs.into_iter().next().unwrap().unwrap_err());
    };
    Ok(TrainTrace {
        objective: run.objective.clone(),
        grad_norm: run.grad_norm.clone(),
        params: run.best.clone(),
        theta: Vec::new(),
        converged: run.converged,
        best_restart,
        best_objective: run.best_objective,
        restart_objectives: runs.iter().map(|r| r.as_ref().ok().map(|r| r.best_objective)).collect(),
    })
}

fn write_log(path: &PathBuf, runs: &[Result<AdamRun, TrainError>], every: usize) -> Result<(), TrainError> {
    let io = |e: std::io::Error| TrainError::Io(format!("{}: {e}", path.display()));
    let mut w = BufWriter::new(File::create(path).map_err(io)?);
    for (restart, run) in runs.iter().enumerate() {
        let Ok(run) = run else { continue };
        for (epoch, (f, g)) in run.objective.iter().zip(&run.grad_norm).enumerate() {
            if epoch % every == 0 || epoch + 1 == run.objective.len() {
                let rec = serde_json::json!({
                    "restart": restart,
                    "epoch": epoch,
                    "objective": f,
                    "grad_norm": g,
                });
                writeln!(w, "{rec}").map_err(io)?;
            }
        }
    }
    w.flush().map_err(io)
}

/// `LML + log prior` of `model` at packed parameters `u`, summed over one or
/// more datasets that share the hyperparameters.
pub fn penalized_objective(
    model: &GpModel,
    data: &[(&DMatrix<f64>, &DVector<f64>)],
    u: &[f64],
) -> Result<(f64, Vec<f64>), TrainError> {
    let mut m = model.clone();
    m.unpack(u)?;
    let mut f = m.log_prior();
    let mut g = m.log_prior_grad();
    for (x, y) in data {
        let (lml, grad, _) = lml_and_gradient(&m, x, y)?;
        f += lml;
        g.iter_mut().zip(&grad).for_each(|(a, b)| *a += b);
    }
    if !f.is_finite() {
        return Err(TrainError::NonFiniteObjective);
    }
    Ok((f, g))
}

/// The optimization problem for a model's own packed parameters.
pub fn model_problem(model: &GpModel) -> Problem {
    let learnable = model.learnable_mask();
    let jitter = model
        .roles()
        .iter()
        .zip(&learnable)
        .map(|(r, &l)| l && *r == ParamRole::Lengthscale)
        .collect();
    Problem { start: model.pack(), learnable, jitter, bounds: model.bounds() }
}

/// Maximizes the summed marginal likelihood of several datasets under one
/// shared set of hyperparameters.
pub fn optimize_shared(
    model: &GpModel,
    data: &[(&DMatrix<f64>, &DVector<f64>)],
    cfg: &TrainConfig,
) -> Result<(GpModel, TrainTrace), TrainError> {
    let problem = model_problem(model);
    let mut trace = maximize(|u: &[f64]| penalized_objective(model, data, u), &problem, cfg)?;
    let mut fitted = model.clone();
    fitted.unpack(&trace.params)?;
    fitted.kernel.project();
    fitted.noise.project();
    trace.theta = fitted.named_values();
    Ok((fitted, trace))
}

/// Fits the model's hyperparameters to `(x, y)` by maximizing
/// `LML(θ) + log p(θ)` with restarted full-batch Adam.
pub fn optimize(
    model: &GpModel,
    x: &DMatrix<f64>,
    y: &DVector<f64>,
    cfg: &TrainConfig,
) -> Result<(GpModel, TrainTrace), TrainError> {
    optimize_shared(model, &[(x, y)], cfg)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gp::{generate_synthetic, log_marginal_likelihood, fit_cache};
    use crate::kernels::{parse_kernel_expr, GaussianPrior};

    fn se(ell: f64, var: f64, noise: f64) -> GpModel {
        let mut k = parse_kernel_expr("SE(x)", &["x".to_string()]).unwrap();
        k.params_mut()[0].set_value(var);
        k.params_mut()[1].set_value(ell);
        GpModel::new(k, noise)
    }

    fn uniform_x(n: usize, lo: f64, hi: f64, seed: u64) -> DMatrix<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        DMatrix::from_fn(n, 1, |_, _| rng.random_range(lo..hi))
    }

    #[test]
    fn zero_epochs_returns_initial_theta() {
        let m = se(0.5, 1.0, 0.1);
        let x = uniform_x(20, 0.0, 5.0, 1);
        let y = x.column(0).map(f64::sin);
        let cfg = TrainConfig { epochs: 0, restarts: 1, ..Default::default() };
        let (fitted, trace) = optimize(&m, &x, &y, &cfg).unwrap();
        assert_eq!(fitted.pack(), m.pack());
        assert_eq!(trace.objective.len(), 1);
    }

    #[test]
    fn trace_has_one_entry_per_epoch_plus_start() {
        let m = se(0.5, 1.0, 0.1);
        let x = uniform_x(20, 0.0, 5.0, 1);
        let y = x.column(0).map(f64::sin);
        let cfg = TrainConfig { epochs: 7, restarts: 1, grad_tol: 0.0, ..Default::default() };
        let (_, trace) = optimize(&m, &x, &y, &cfg).unwrap();
        assert_eq!(trace.objective.len(), 8);
        assert!(trace.best_objective >= trace.initial_objective());
    }

    #[test]
    fn recovers_lengthscale_from_synthetic_draw() {
        let truth = se(1.0, 1.0, 0.1);
        let x = uniform_x(500, 0.0, 20.0, 2);
        let y = generate_synthetic(&truth, &x, 3).unwrap().observed;
        let start = se(0.3, 1.0, 0.1);
        let cfg = TrainConfig { learning_rate: 0.05, epochs: 300, restarts: 1, ..Default::default() };
        let (fitted, _) = optimize(&start, &x, &y, &cfg).unwrap();
        let ell = fitted.kernel.params()[1].value();
        assert!((ell - 1.0).abs() < 0.2, "ℓ = {ell}");
    }

    #[test]
    fn tight_prior_dominates_uninformative_data() {
        let u0 = 0.7f64;
        let mut m = se(u0.exp(), 1.0, 0.5);
        let p = m.kernel.param_mut("se_0.lengthscale").unwrap();
        p.prior = Some(GaussianPrior::new(u0, 0.01));
        let x = uniform_x(5, 0.0, 1.0, 4);
        let y = DVector::from_vec(vec![0.1, -0.3, 0.2, 0.0, 0.4]);
        let cfg = TrainConfig { learning_rate: 0.01, epochs: 200, restarts: 1, ..Default::default() };
        let (fitted, _) = optimize(&m, &x, &y, &cfg).unwrap();
        let u = fitted.kernel.params()[1].unconstrained();
        assert!((u - u0).abs() < 0.03, "u = {u}");

        // grid oracle over the lengthscale alone, other parameters at their fitted values
        let objective = |u: f64| {
            let mut g = fitted.clone();
            g.kernel.params_mut()[1].set_unconstrained(u);
            log_marginal_likelihood(&fit_cache(&g, &x, &y).unwrap()) + g.log_prior()
        };
        let grid_best = (0..=600)
            .map(|i| u0 - 0.03 + 0.0001 * i as f64)
            .max_by(|a, b| objective(*a).total_cmp(&objective(*b)))
            .unwrap();
        assert!((grid_best - u).abs() < 0.01, "grid {grid_best} vs adam {u}");
    }

    #[test]
    fn pure_noise_model_finds_sample_variance() {
        let mut m = se(1.0, 1e-22, 0.5);
        m.kernel.params_mut()[0].learnable = false;
        m.kernel.params_mut()[1].learnable = false;
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let y = DVector::from_fn(200, |_, _| rng.random_range(-2.0..2.0) + 0.3);
        let x = uniform_x(200, 0.0, 1.0, 7);
        let cfg = TrainConfig { learning_rate: 0.05, epochs: 400, restarts: 1, ..Default::default() };
        let (fitted, trace) = optimize(&m, &x, &y, &cfg).unwrap();
        let target = y.norm_squared() / 200.0;
        assert!((fitted.noise_variance() / target - 1.0).abs() < 0.02);
        assert!(trace.best_objective >= trace.initial_objective());
    }

    #[test]
    fn seeded_runs_are_bitwise_identical() {
        let m = se(0.5, 1.0, 0.1);
        let x = uniform_x(40, 0.0, 5.0, 8);
        let y = x.column(0).map(|v| v.sin() + 0.1 * v);
        let cfg = TrainConfig { epochs: 20, restarts: 3, seed: 42, ..Default::default() };
        let a = optimize(&m, &x, &y, &cfg).unwrap().1;
        let b = optimize(&m, &x, &y, &cfg).unwrap().1;
        assert_eq!(a, b);
    }

    #[test]
    fn more_restarts_never_hurt() {
        let m = se(0.2, 1.0, 0.1);
        let x = uniform_x(40, 0.0, 5.0, 9);
        let y = x.column(0).map(|v| (2.0 * v).sin());
        let mut prev = f64::NEG_INFINITY;
        for k in 1..=4 {
            let cfg = TrainConfig { epochs: 15, restarts: k, seed: 5, ..Default::default() };
            let t = optimize(&m, &x, &y, &cfg).unwrap().1;
            assert!(t.best_objective >= prev);
            prev = t.best_objective;
        }
    }

    #[test]
    fn log_records_every_restart() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("trace.jsonl");
        let m = se(0.5, 1.0, 0.1);
        let x = uniform_x(10, 0.0, 5.0, 1);
        let y = x.column(0).map(f64::cos);
        let cfg = TrainConfig {
            epochs: 4,
            restarts: 2,
            grad_tol: 0.0,
            log_path: Some(path.clone()),
            ..Default::default()
        };
        optimize(&m, &x, &y, &cfg).unwrap();
        let text = std::fs::read_to_string(path).unwrap();
        let lines: Vec<serde_json::Value> = text.lines().map(|l| serde_json::from_str(l).unwrap()).collect();
        assert_eq!(lines.len(), 10);
        assert_eq!(lines[5]["restart"], 1);
        assert_eq!(lines[5]["epoch"], 0);
    }

    #[test]
    fn invalid_config_rejected() {
        let m = se(0.5, 1.0, 0.1);
        let x = uniform_x(5, 0.0, 1.0, 1);
        let y = DVector::zeros(5);
        let cfg = TrainConfig { learning_rate: 0.0, ..Default::default() };
        assert!(matches!(optimize(&m, &x, &y, &cfg), Err(TrainError::InvalidConfig(_))));
    }
}

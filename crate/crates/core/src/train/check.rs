use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use super::{initialize_hyperparams, optimize, TrainConfig, TrainError};
use crate::gp::{fit_cache, generate_synthetic, lml_gradient, log_marginal_likelihood, GpError, GpModel};

/// Central-difference step in log-space.
pub const FD_STEP: f64 = 1e-6;
/// Relative error above which a parameter is flagged.
pub const GRAD_FLAG_TOL: f64 = 1e-4;
/// Absolute floor on the relative-error denominator, so that gradients that
/// are zero up to rounding are not reported as huge relative errors.
const REL_FLOOR: f64 = 1e-2;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GradientCheck {
    pub name: String,
    pub analytic: f64,
    pub numeric: f64,
    pub rel_error: f64,
    pub flagged: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GradientReport {
    pub entries: Vec<GradientCheck>,
    pub max_rel_error: f64,
    pub all_pass: bool,
}

/// Compares the analytic LML gradient with central differences.
pub fn check_gradients(model: &GpModel, x: &DMatrix<f64>, y: &DVector<f64>) -> Result<GradientReport, GpError> {
    check_gradients_with(model, x, y, lml_gradient)
}

/// As [`check_gradients`], with the analytic gradient supplied by `grad`.
pub fn check_gradients_with<G>(
    model: &GpModel,
    x: &DMatrix<f64>,
    y: &DVector<f64>,
    grad: G,
) -> Result<GradientReport, GpError>
where
    G: Fn(&GpModel, &DMatrix<f64>, &DVector<f64>) -> Result<Vec<f64>, GpError>,
{
    let analytic = grad(model, x, y)?;
    let u0 = model.pack();
    let names = model.param_names();
    let lml_at = |u: &[f64]| -> Result<f64, GpError> {
        let mut m = model.clone();
        m.unpack(u)?;
        Ok(log_marginal_likelihood(&fit_cache(&m, x, y)?))
    };
    let mut entries = Vec::new();
    for i in 0..u0.len() {
        if !u0[i].is_finite() {
            continue;
        }
        let mut up = u0.clone();
        up[i] += FD_STEP;
        let mut dn = u0.clone();
        dn[i] -= FD_STEP;
        let numeric = (lml_at(&up)? - lml_at(&dn)?) / (2.0 * FD_STEP);
        let a = analytic[i];
        let rel_error = (a - numeric).abs() / a.abs().max(numeric.abs()).max(REL_FLOOR);
        entries.push(GradientCheck {
            name: names[i].clone(),
            analytic: a,
            numeric,
            rel_error,
            flagged: !(rel_error <= GRAD_FLAG_TOL),
        });
    }
    let max_rel_error = entries.iter().map(|e| e.rel_error).fold(0.0, f64::max);
    let all_pass = entries.iter().all(|e| !e.flagged);
    Ok(GradientReport { entries, max_rel_error, all_pass })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SelfCheckReport {
    /// `(name, true value, recovered value, relative error)` per learnable parameter.
    pub parameters: Vec<(String, f64, f64, f64)>,
    pub tolerance: f64,
    pub passed: bool,
}

/// Draws fake data from `truth` at inputs `x`, refits from data-driven
/// initial values and reports how well each learnable hyperparameter was
/// recovered.
pub fn self_check(
    truth: &GpModel,
    x: &DMatrix<f64>,
    seed: u64,
    cfg: &TrainConfig,
    tolerance: f64,
) -> Result<SelfCheckReport, TrainError> {
    let y = generate_synthetic(truth, x, seed)?.observed;
    let start = initialize_hyperparams(truth, x, &y, &[])?;
    let (fitted, _) = optimize(&start, x, &y, cfg)?;
    let mask = truth.learnable_mask();
    let parameters: Vec<(String, f64, f64, f64)> = truth
        .named_values()
        .into_iter()
        .zip(fitted.named_values())
        .zip(&mask)
        .filter(|(_, &l)| l)
        .map(|(((name, t), (_, f)), _)| {
            let rel = (f - t).abs() / t.abs();
            (name, t, f, rel)
        })
        .collect();
    let passed = parameters.iter().all(|p| p.3 <= tolerance);
    Ok(SelfCheckReport { parameters, tolerance, passed })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::kernels::parse_kernel_expr;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn fixture() -> (GpModel, DMatrix<f64>, DVector<f64>) {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let s: Vec<String> = vec!["a".into(), "b".into(), "c".into()];
        let mut k = parse_kernel_expr("Mat32(a,b) + Mat32(c)", &s).unwrap();
        for p in k.params_mut() {
            p.set_unconstrained(rng.random_range(-0.7..0.7));
        }
        let m = GpModel::new(k, 0.2);
        let x = DMatrix::from_fn(20, 3, |_, _| rng.random_range(-2.0..2.0));
        let y = DVector::from_fn(20, |_, _| rng.random_range(-1.5..1.5));
        (m, x, y)
    }

    #[test]
    fn correct_gradient_passes() {
        let (m, x, y) = fixture();
        let r = check_gradients(&m, &x, &y).unwrap();
        assert_eq!(r.entries.len(), 5);
        assert!(r.all_pass);
        assert!(r.max_rel_error < 1e-5, "{}", r.max_rel_error);
    }

    #[test]
    fn doubled_gradient_is_flagged() {
        let (m, x, y) = fixture();
        let doubled = |m: &GpModel, x: &DMatrix<f64>, y: &DVector<f64>| {
            lml_gradient(m, x, y).map(|g| g.into_iter().map(|v| 2.0 * v).collect())
        };
        let r = check_gradients_with(&m, &x, &y, doubled).unwrap();
        assert!(!r.all_pass);
        assert!(r.entries.iter().filter(|e| e.analytic.abs() > 1e-3).all(|e| e.flagged));
    }

    #[test]
    fn report_is_a_pure_function_of_model_and_data() {
        let (m, x, y) = fixture();
        assert_eq!(check_gradients(&m, &x, &y).unwrap(), check_gradients(&m, &x, &y).unwrap());
    }
}

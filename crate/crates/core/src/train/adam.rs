//! Full-batch Adam ascent over a packed parameter vector.

/// Per-epoch record of one optimizer run.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamRun {
    /// Best iterate seen.
    pub best: Vec<f64>,
    pub best_objective: f64,
    /// Objective at the starting point and after every step.
    pub objective: Vec<f64>,
    /// `‖grad‖∞` over learnable entries at each recorded point.
    pub grad_norm: Vec<f64>,
    pub converged: bool,
    /// True when an evaluation failed mid-run and the run stopped early.
    pub aborted: bool,
}

pub const BETA1: f64 = 0.9;
pub const BETA2: f64 = 0.999;
pub const EPSILON: f64 = 1e-8;

/// Step size, epoch budget and early-stop threshold.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Adam {
    pub learning_rate: f64,
    pub epochs: usize,
    pub grad_tol: f64,
}

/// Maximizes `f` starting at `start`.
///
/// `eval` returns the objective and its gradient, or `None` when the point is
/// infeasible. Entries with `learnable[i] == false` are held fixed. Bounds
/// are enforced by projecting after each step. The first evaluation must
/// succeed, which callers check before calling this.
pub fn adam<F>(
    settings: Adam,
    mut eval: F,
    start: Vec<f64>,
    first: (f64, Vec<f64>),
    learnable: &[bool],
    bounds: &[Option<(f64, f64)>],
) -> AdamRun
where
    F: FnMut(&[f64]) -> Option<(f64, Vec<f64>)>,
{
    let Adam { learning_rate, epochs, grad_tol } = settings;
    let p = start.len();
    let masked_norm = |g: &[f64]| {
        g.iter()
            .zip(learnable)
            .filter(|(_, &l)| l)
            .fold(0.0f64, |m, (v, _)| m.max(v.abs()))
    };
    let (f0, mut g) = first;
    let mut u = start;
    let mut run = AdamRun {
        best: u.clone(),
        best_objective: f0,
        objective: vec![f0],
        grad_norm: vec![masked_norm(&g)],
        converged: false,
        aborted: false,
    };
    let mut m = vec![0.0; p];
    let mut v = vec![0.0; p];
    for t in 1..=epochs {
        if *run.grad_norm.last().unwrap() < grad_tol {
            run.converged = true;
            break;
        }
        let c1 = 1.0 - BETA1.powi(t as i32);
        let c2 = 1.0 - BETA2.powi(t as i32);
        for i in 0..p {
            if !learnable[i] {
                continue;
            }
            m[i] = BETA1 * m[i] + (1.0 - BETA1) * g[i];
            v[i] = BETA2 * v[i] + (1.0 - BETA2) * g[i] * g[i];
            u[i] += learning_rate * (m[i] / c1) / ((v[i] / c2).sqrt() + EPSILON);
            if let Some((lo, hi)) = bounds[i] {
                u[i] = u[i].clamp(lo, hi);
            }
        }
        match eval(&u) {
            Some((f, grad)) if f.is_finite() && grad.iter().all(|x| x.is_finite()) => {
                if f > run.best_objective {
                    run.best_objective = f;
                    run.best.clone_from(&u);
                }
                run.objective.push(f);
                run.grad_norm.push(masked_norm(&grad));
                g = grad;
            }
            _ => {
                run.aborted = true;
                break;
            }
        }
    }
    if !run.converged && !run.aborted {
        run.converged = *run.grad_norm.last().unwrap() < grad_tol;
    }
    run
}

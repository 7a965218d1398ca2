use nalgebra::{DMatrix, DVector};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use super::exact::{factor_with_ladder, PosteriorCache};
use super::{check_data, GpError, GpModel};
use crate::kernels::CompiledKernel;

/// A latent prior draw and the noisy observations built from it.
#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticDraw {
    pub latent: DVector<f64>,
    pub observed: DVector<f64>,
}

fn draws(
    model: &GpModel,
    inputs: &DMatrix<f64>,
    count: usize,
    rng: &mut ChaCha8Rng,
    condition: Option<&PosteriorCache>,
) -> Result<DMatrix<f64>, GpError> {
    let m = inputs.nrows();
    if count == 0 || m == 0 {
        return Ok(DMatrix::zeros(count, m));
    }
    check_data(model, inputs, None)?;
    let kernel = CompiledKernel::new(&model.kernel);
    let mut cov = kernel.gram(inputs);
    let mut mean = model.mean.eval(inputs);
    if let Some(cache) = condition {
        if inputs.ncols() != cache.train_inputs.ncols() {
            return Err(GpError::DimensionMismatch { expected: cache.train_inputs.ncols(), found: inputs.ncols() });
        }
        let kxs = kernel.cross(&cache.train_inputs, inputs);
        mean += kxs.tr_mul(&cache.alpha);
        let v = cache.chol.solve_lower(&kxs);
        cov -= v.tr_mul(&v);
        cov.fill_upper_triangle_with_lower_triangle();
    }
    let (chol, _) = factor_with_ladder(cov, 0.0, &model.jitter_ladder)?;
    let z = DMatrix::from_fn(m, count, |_, _| StandardNormal.sample(rng));
    let mut out = (chol.l() * z).transpose();
    for mut row in out.row_iter_mut() {
        row += mean.transpose();
    }
    Ok(out)
}

/// `count` joint draws of `f` at `inputs`, one per row. Draws come from the
/// prior, or from the posterior when a training cache is supplied.
pub fn sample(
    model: &GpModel,
    inputs: &DMatrix<f64>,
    count: usize,
    seed: u64,
    condition: Option<&PosteriorCache>,
) -> Result<DMatrix<f64>, GpError> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    draws(model, inputs, count, &mut rng, condition)
}

/// One prior function draw at `x` plus i.i.d. `N(0, σ_n²)` noise.
///
/// The latent draw equals `sample(model, x, 1, seed, None)`.
pub fn generate_synthetic(model: &GpModel, x: &DMatrix<f64>, seed: u64) -> Result<SyntheticDraw, GpError> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let f = draws(model, x, 1, &mut rng, None)?;
    let latent = DVector::from_iterator(x.nrows(), f.row(0).iter().copied());
    let sd = model.noise_variance().sqrt();
    let observed = latent.map(|v| {
        let e: f64 = StandardNormal.sample(&mut rng);
        v + sd * e
    });
    Ok(SyntheticDraw { latent, observed })
}

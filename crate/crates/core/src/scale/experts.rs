use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{aggregate, Aggregated, Aggregation, ExpertMarginals, ScaleError};
use crate::data::Chunking;
use crate::gp::{fit_cache, predict, GpModel, PosteriorCache};
use crate::kernels::CompiledKernel;
use crate::train::{initialize_hyperparams, optimize, optimize_shared, TrainConfig, TrainError, TrainTrace};

/// Whether experts learn their own hyperparameters or one shared set.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Sharing {
    #[default]
    Independent,
    SharedHypers,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExpertOptions {
    pub sharing: Sharing,
    pub aggregation: Aggregation,
    /// Re-run data-driven initialization on each chunk (independent experts)
    /// or on the pooled chunks (shared).
    pub initialize: bool,
    /// Initial values applied after initialization, by parameter name.
    pub overrides: Vec<(String, f64)>,
}

impl Default for ExpertOptions {
    fn default() -> Self {
        Self { sharing: Sharing::Independent, aggregation: Aggregation::RobustBcm, initialize: true, overrides: Vec::new() }
    }
}

/// One fitted GP and the chunk it was trained on.
#[derive(Clone, Debug)]
pub struct Expert {
    pub chunk: usize,
    pub model: GpModel,
    pub cache: PosteriorCache,
}

#[derive(Clone, Debug)]
pub struct ExpertEnsemble {
    pub chunking: Chunking,
    pub experts: Vec<Expert>,
    pub sharing: Sharing,
    pub aggregation: Aggregation,
    /// Chunks that failed to fit, with the reason. Their rows are unused.
    pub failures: Vec<(usize, String)>,
    /// Training trace per expert (one entry when hyperparameters are shared).
    pub traces: Vec<TrainTrace>,
}

fn chunk_data(x: &DMatrix<f64>, y: &DVector<f64>, rows: &[usize]) -> (DMatrix<f64>, DVector<f64>) {
    (x.select_rows(rows), y.select_rows(rows))
}

/// Fits one exact GP per chunk of `chunking`.
///
/// Chunks that fail (non-factorizable covariance, non-finite objective) are
/// dropped and listed in `failures`; the call only fails when none succeed.
pub fn fit_experts(
    x: &DMatrix<f64>,
    y: &DVector<f64>,
    chunking: &Chunking,
    template: &GpModel,
    cfg: &TrainConfig,
    options: &ExpertOptions,
) -> Result<ExpertEnsemble, ScaleError> {
    let members = chunking.members();
    for (c, rows) in members.iter().enumerate() {
        if rows.len() > template.max_exact {
            return Err(ScaleError::ChunkTooLarge { chunk: c, n: rows.len(), cap: template.max_exact });
        }
    }
    let data: Vec<(DMatrix<f64>, DVector<f64>)> = members.iter().map(|r| chunk_data(x, y, r)).collect();
    let mut experts = Vec::new();
    let mut failures = Vec::new();
    let mut traces = Vec::new();
    match options.sharing {
        Sharing::Independent => {
            let fits: Vec<Result<(GpModel, TrainTrace, PosteriorCache), TrainError>> = data
                .par_iter()
                .map(|(xc, yc)| {
                    let start = if options.initialize {
                        initialize_hyperparams(template, xc, yc, &options.overrides)?
                    } else {
                        template.clone()
                    };
                    let (model, trace) = optimize(&start, xc, yc, cfg)?;
                    let cache = fit_cache(&model, xc, yc)?;
                    Ok((model, trace, cache))
                })
                .collect();
            for (chunk, fit) in fits.into_iter().enumerate() {
                match fit {
                    Ok((model, trace, cache)) => {
                        experts.push(Expert { chunk, model, cache });
                        traces.push(trace);
                    }
                    Err(e) => failures.push((chunk, e.to_string())),
                }
            }
        }
        Sharing::SharedHypers => {
            let start = if options.initialize {
                initialize_hyperparams(template, x, y, &options.overrides)?
            } else {
                template.clone()
            };
            let refs: Vec<(&DMatrix<f64>, &DVector<f64>)> = data.iter().map(|(a, b)| (a, b)).collect();
            let (model, trace) = optimize_shared(&start, &refs, cfg)?;
            let caches: Vec<_> = data.par_iter().map(|(xc, yc)| fit_cache(&model, xc, yc)).collect();
            for (chunk, cache) in caches.into_iter().enumerate() {
                match cache {
                    Ok(cache) => experts.push(Expert { chunk, model: model.clone(), cache }),
                    Err(e) => failures.push((chunk, e.to_string())),
                }
            }
            traces.push(trace);
        }
    }
    if experts.is_empty() {
        let reasons: Vec<String> = failures.iter().map(|(c, e)| format!("chunk {c}: {e}")).collect();
        return Err(ScaleError::AllChunksFailed(reasons.join("; ")));
    }
    Ok(ExpertEnsemble {
        chunking: chunking.clone(),
        experts,
        sharing: options.sharing,
        aggregation: options.aggregation,
        failures,
        traces,
    })
}

impl ExpertEnsemble {
    /// Rebuilds an ensemble from fitted experts, e.g. after deserialization.
    pub fn from_parts(
        chunking: Chunking,
        experts: Vec<Expert>,
        sharing: Sharing,
        aggregation: Aggregation,
    ) -> Result<Self, ScaleError> {
        if experts.is_empty() {
            return Err(ScaleError::NoExperts);
        }
        Ok(Self { chunking, experts, sharing, aggregation, failures: Vec::new(), traces: Vec::new() })
    }

    /// Per-expert latent marginals at `xs`, in chunk order.
    pub fn expert_marginals(&self, xs: &DMatrix<f64>) -> Result<Vec<ExpertMarginals>, ScaleError> {
        self.experts
            .par_iter()
            .map(|e| {
                let p = predict(&e.model, &e.cache, xs)?;
                Ok(ExpertMarginals {
                    mean: p.mean,
                    latent_var: p.latent_var,
                    prior_mean: e.model.mean.eval(xs).as_slice().to_vec(),
                    prior_var: CompiledKernel::new(&e.model.kernel).diag(xs),
                    noise: e.model.noise_variance(),
                })
            })
            .collect()
    }

    /// Aggregated predictive distribution at `xs`.
    pub fn predict(&self, xs: &DMatrix<f64>) -> Result<Aggregated, ScaleError> {
        let marginals = self.expert_marginals(xs)?;
        aggregate(&marginals, self.aggregation, self.sharing == Sharing::SharedHypers)
    }
}

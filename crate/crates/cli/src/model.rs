//! The model document: one JSON file holding everything needed to predict.
//!
//! Top-level keys:
//!
//! | key        | content                                                    |
//! |------------|------------------------------------------------------------|
//! | format     | `"gpframe-model"`                                          |
//! | version    | crate version that wrote the document                      |
//! | name       | model label used in reports                                |
//! | seed       | master seed                                                |
//! | config     | effective pipeline config                                  |
//! | features   | input column names, in model column order                  |
//! | target     | target column name                                         |
//! | transforms | fitted input/target transforms and training fingerprint    |
//! | training   | training row ids, inputs and targets (transformed scale)   |
//! | fitted     | mode-tagged fitted state (θ, chunks, inducing inputs)      |
//! | report     | training summary                                           |

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use gpframe::data::{Chunking, ChunkMethod};
use gpframe::gp::{fit_cache, predict, GpModel, PosteriorCache, PredictiveDistribution};
use gpframe::kernels::{CompiledKernel, KernelExpr};
use gpframe::scale::{Aggregation, Expert, ExpertEnsemble, KroneckerSystem, Sharing, SparseGp};
use gpframe::train::TrainTrace;
use gpframe::transforms::TransformSpec;

use crate::config::PipelineConfig;
use crate::CliError;

pub const FORMAT: &str = "gpframe-model";
pub const VERSION: &str = env!("CARGO_PKG_VERSION");

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelDocument {
    pub format: String,
    pub version: String,
    pub name: String,
    pub seed: u64,
    pub config: PipelineConfig,
    pub features: Vec<String>,
    pub target: String,
    pub transforms: TransformSpec,
    pub training: TrainingData,
    pub fitted: FittedState,
    pub report: TrainReport,
}

/// Training rows on the transformed scale.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainingData {
    pub row_ids: Vec<u64>,
    pub inputs: Vec<Vec<f64>>,
    pub targets: Vec<f64>,
}

impl TrainingData {
    pub fn new(row_ids: Vec<u64>, x: &DMatrix<f64>, y: &DVector<f64>) -> Self {
        Self { row_ids, inputs: rows_of(x), targets: y.iter().copied().collect() }
    }

    pub fn matrices(&self) -> (DMatrix<f64>, DVector<f64>) {
        (matrix_of(&self.inputs, self.width()), DVector::from_column_slice(&self.targets))
    }

    fn width(&self) -> usize {
        self.inputs.first().map_or(0, Vec::len)
    }
}

pub(crate) fn rows_of(x: &DMatrix<f64>) -> Vec<Vec<f64>> {
    x.row_iter().map(|r| r.iter().copied().collect()).collect()
}

pub(crate) fn matrix_of(rows: &[Vec<f64>], width: usize) -> DMatrix<f64> {
    DMatrix::from_fn(rows.len(), width, |i, j| rows[i][j])
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExpertState {
    pub chunk: usize,
    pub model: GpModel,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "mode", rename_all = "snake_case")]
pub enum FittedState {
    Exact {
        model: GpModel,
    },
    Experts {
        sharing: Sharing,
        aggregation: Aggregation,
        chunking: ChunkMethod,
        n_chunks: usize,
        /// Chunk id of each training row.
        assignment: Vec<usize>,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        centroids: Option<Vec<Vec<f64>>>,
        experts: Vec<ExpertState>,
        failures: Vec<(usize, String)>,
    },
    Svgp {
        model: GpModel,
        /// Inducing inputs on the transformed scale, one row each.
        inducing: Vec<Vec<f64>>,
        bound: f64,
    },
    Kronecker {
        model: GpModel,
        /// Model column of each grid axis, slowest-varying first.
        axes: Vec<usize>,
    },
}

/// Summary of one optimization run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub label: String,
    pub rows: usize,
    pub initial_objective: f64,
    pub final_objective: f64,
    pub epochs: usize,
    pub converged: bool,
    pub best_restart: usize,
    pub restart_objectives: Vec<Option<f64>>,
    pub theta: Vec<(String, f64)>,
}

impl RunSummary {
    pub fn from_trace(label: impl Into<String>, rows: usize, t: &TrainTrace) -> Self {
        Self {
            label: label.into(),
            rows,
            initial_objective: t.initial_objective(),
            final_objective: t.best_objective,
            epochs: t.objective.len() - 1,
            converged: t.converged,
            best_restart: t.best_restart,
            restart_objectives: t.restart_objectives.clone(),
            theta: t.theta.clone(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub mode: String,
    pub n_train: usize,
    /// Every run ended at an objective at least as high as where it started.
    pub improved: bool,
    pub runs: Vec<RunSummary>,
    /// Log marginal likelihood of the conditioned exact model (exact mode only).
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub lml: Option<f64>,
}

impl TrainReport {
    pub fn new(mode: &str, n_train: usize, runs: Vec<RunSummary>, lml: Option<f64>) -> Self {
        let improved = runs.iter().all(|r| r.final_objective >= r.initial_objective);
        Self { mode: mode.to_string(), n_train, improved, runs, lml }
    }
}

/// Exact GP over a full grid, solved through per-axis eigendecompositions.
#[derive(Clone, Debug)]
pub struct KroneckerPredictor {
    pub model: GpModel,
    /// Training inputs in grid order.
    pub inputs: DMatrix<f64>,
    pub system: KroneckerSystem,
    alpha: DVector<f64>,
}

/// Per-axis kernels of a product of single-feature leaves, rebound to
/// column 0 of each axis matrix.
fn axis_kernels(kernel: &KernelExpr) -> Result<Vec<(usize, KernelExpr)>, CliError> {
    let leaves = match kernel {
        KernelExpr::Leaf(_) => vec![kernel],
        KernelExpr::Product(children) => children.iter().collect(),
        KernelExpr::Sum(_) => {
            return Err(CliError::Config("kronecker mode needs a product of one-feature kernels".into()))
        }
    };
    let mut out: Vec<(usize, KernelExpr)> = Vec::new();
    for leaf in leaves {
        let KernelExpr::Leaf(k) = leaf else {
            return Err(CliError::Config("kronecker mode needs a product of one-feature kernels".into()));
        };
        if k.columns.len() != 1 {
            return Err(CliError::Config(format!(
                "kronecker mode needs one feature per factor, got [{}]",
                k.features.join(",")
            )));
        }
        if out.iter().any(|(c, _)| *c == k.columns[0]) {
            return Err(CliError::Config(format!("feature '{}' appears in two factors", k.features[0])));
        }
        let mut axis = k.clone();
        axis.columns = vec![0];
        out.push((k.columns[0], KernelExpr::leaf(axis)));
    }
    Ok(out)
}

/// Grid coordinates per axis and the permutation putting rows in grid order
/// (first axis slowest). Fails unless the rows form a complete grid.
pub fn grid_order(x: &DMatrix<f64>, columns: &[usize]) -> Result<(Vec<Vec<f64>>, Vec<usize>), CliError> {
    let mut coords = Vec::new();
    for &c in columns {
        let mut v: Vec<f64> = x.column(c).iter().copied().collect();
        v.sort_by(f64::total_cmp);
        v.dedup();
        coords.push(v);
    }
    let total: usize = coords.iter().map(Vec::len).product();
    if total != x.nrows() {
        return Err(CliError::Data(format!(
            "inputs do not form a complete grid: {} rows, axis sizes {:?}",
            x.nrows(),
            coords.iter().map(Vec::len).collect::<Vec<_>>()
        )));
    }
    let mut slot = vec![usize::MAX; total];
    for i in 0..x.nrows() {
        let mut lin = 0;
        for (a, &c) in columns.iter().enumerate() {
            let k = coords[a].binary_search_by(|v| v.total_cmp(&x[(i, c)])).expect("value is on its own axis");
            lin = lin * coords[a].len() + k;
        }
        if slot[lin] != usize::MAX {
            return Err(CliError::Data("inputs do not form a complete grid: repeated grid point".into()));
        }
        slot[lin] = i;
    }
    Ok((coords, slot))
}

impl KroneckerPredictor {
    pub fn new(model: GpModel, x: &DMatrix<f64>, y: &DVector<f64>) -> Result<(Self, Vec<usize>), CliError> {
        let axes = axis_kernels(&model.kernel)?;
        let columns: Vec<usize> = axes.iter().map(|(c, _)| *c).collect();
        let (coords, order) = grid_order(x, &columns)?;
        let kernels: Vec<KernelExpr> = axes.into_iter().map(|(_, k)| k).collect();
        let axis_mats: Vec<DMatrix<f64>> = coords.iter().map(|v| DMatrix::from_column_slice(v.len(), 1, v)).collect();
        let system = KroneckerSystem::from_grid(&kernels, &axis_mats, model.noise_variance())?;
        let inputs = x.select_rows(&order);
        let resid = y.select_rows(&order) - model.mean.eval(&inputs);
        let alpha = system.solve(&resid)?;
        Ok((Self { model, inputs, system, alpha }, columns))
    }

    pub fn predict(&self, xs: &DMatrix<f64>) -> Result<PredictiveDistribution, CliError> {
        let kernel = CompiledKernel::new(&self.model.kernel);
        let cross = kernel.cross(xs, &self.inputs);
        let prior_var = kernel.diag(xs);
        let prior_mean = self.model.mean.eval(xs);
        let rows: Vec<usize> = (0..xs.nrows()).collect();
        let parts: Vec<(f64, f64)> = rows
            .par_iter()
            .map(|&i| {
                let k = cross.row(i).transpose();
                let v = self.system.solve(&k)?;
                Ok((prior_mean[i] + k.dot(&self.alpha), prior_var[i] - k.dot(&v)))
            })
            .collect::<Result<_, gpframe::scale::ScaleError>>()?;
        let noise = self.model.noise_variance();
        let mut out = PredictiveDistribution { mean: vec![], latent_var: vec![], obs_var: vec![], clamped: 0 };
        for (m, v) in parts {
            let v = if v < 0.0 {
                out.clamped += 1;
                0.0
            } else {
                v
            };
            out.mean.push(m);
            out.latent_var.push(v);
            out.obs_var.push(v + noise);
        }
        Ok(out)
    }
}

#[derive(Clone, Debug)]
pub enum Predictor {
    Exact { model: GpModel, cache: PosteriorCache },
    Experts(ExpertEnsemble),
    Svgp(SparseGp),
    Kronecker(KroneckerPredictor),
}

/// Predictive marginals on the transformed scale.
#[derive(Clone, Debug)]
pub struct RawPrediction {
    pub dist: PredictiveDistribution,
    /// Points where expert aggregation fell back to the prior.
    pub fallbacks: usize,
}

impl Predictor {
    pub fn predict(&self, xs: &DMatrix<f64>) -> Result<RawPrediction, CliError> {
        Ok(match self {
            Predictor::Exact { model, cache } => RawPrediction { dist: predict(model, cache, xs)?, fallbacks: 0 },
            Predictor::Experts(e) => {
                let a = e.predict(xs)?;
                RawPrediction { dist: a.prediction, fallbacks: a.fallbacks }
            }
            Predictor::Svgp(s) => RawPrediction { dist: s.predict(xs)?, fallbacks: 0 },
            Predictor::Kronecker(k) => RawPrediction { dist: k.predict(xs)?, fallbacks: 0 },
        })
    }
}

/// A model document with its predictor rebuilt.
#[derive(Clone, Debug)]
pub struct Fitted {
    pub doc: ModelDocument,
    pub predictor: Predictor,
}

impl Fitted {
    pub fn from_document(doc: ModelDocument) -> Result<Self, CliError> {
        if doc.format != FORMAT {
            return Err(CliError::Data(format!("not a model document (format '{}')", doc.format)));
        }
        let (x, y) = doc.training.matrices();
        if x.ncols() != doc.features.len() || x.nrows() != y.len() {
            return Err(CliError::Data("model document training data has the wrong shape".into()));
        }
        let predictor = match &doc.fitted {
            FittedState::Exact { model } => Predictor::Exact { model: model.clone(), cache: fit_cache(model, &x, &y)? },
            FittedState::Experts { sharing, aggregation, chunking, n_chunks, assignment, centroids, experts, .. } => {
                if assignment.len() != x.nrows() {
                    return Err(CliError::Data("chunk assignment does not match the training rows".into()));
                }
                let chunking = Chunking {
                    method: chunking.clone(),
                    assignment: assignment.clone(),
                    n_chunks: *n_chunks,
                    inertia: None,
                    centroids: centroids.as_ref().map(|c| matrix_of(c, c.first().map_or(0, Vec::len))),
                };
                let members = chunking.members();
                let rebuilt = experts
                    .par_iter()
                    .map(|e| {
                        let rows = members.get(e.chunk).ok_or_else(|| CliError::Data(format!("unknown chunk {}", e.chunk)))?;
                        let cache = fit_cache(&e.model, &x.select_rows(rows), &y.select_rows(rows))?;
                        Ok(Expert { chunk: e.chunk, model: e.model.clone(), cache })
                    })
                    .collect::<Result<Vec<_>, CliError>>()?;
                Predictor::Experts(ExpertEnsemble::from_parts(chunking, rebuilt, *sharing, *aggregation)?)
            }
            FittedState::Svgp { model, inducing, .. } => {
                let z = matrix_of(inducing, x.ncols());
                Predictor::Svgp(SparseGp::condition(model.clone(), z, &x, &y)?)
            }
            FittedState::Kronecker { model, .. } => Predictor::Kronecker(KroneckerPredictor::new(model.clone(), &x, &y)?.0),
        };
        Ok(Self { doc, predictor })
    }

    pub fn to_json(&self) -> String {
        document_json(&self.doc)
    }
}

pub fn document_json(doc: &ModelDocument) -> String {
    let mut s = serde_json::to_string_pretty(doc).expect("model document serializes");
    s.push('\n');
    s
}

pub fn read_document(path: &std::path::Path) -> Result<ModelDocument, CliError> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| CliError::Data(format!("cannot read model document {}: {e}", path.display())))?;
    serde_json::from_str(&text).map_err(|e| CliError::Data(format!("invalid model document {}: {e}", path.display())))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn grid_order_is_lexicographic_with_first_axis_slowest() {
        // rows listed in scrambled order
        let pts = [(1.0, 20.0), (0.0, 10.0), (1.0, 10.0), (0.0, 20.0), (0.0, 30.0), (1.0, 30.0)];
        let x = DMatrix::from_fn(6, 2, |i, j| if j == 0 { pts[i].0 } else { pts[i].1 });
        let (coords, order) = grid_order(&x, &[0, 1]).unwrap();
        assert_eq!(coords, vec![vec![0.0, 1.0], vec![10.0, 20.0, 30.0]]);
        let sorted: Vec<(f64, f64)> = order.iter().map(|&i| pts[i]).collect();
        assert_eq!(sorted, vec![(0.0, 10.0), (0.0, 20.0), (0.0, 30.0), (1.0, 10.0), (1.0, 20.0), (1.0, 30.0)]);
    }

    #[test]
    fn incomplete_grid_is_rejected() {
        let x = DMatrix::from_row_slice(3, 2, &[0.0, 0.0, 0.0, 1.0, 1.0, 0.0]);
        assert_eq!(grid_order(&x, &[0, 1]).unwrap_err().exit_code(), 3);
        let dup = DMatrix::from_row_slice(4, 2, &[0.0, 0.0, 0.0, 0.0, 1.0, 1.0, 1.0, 0.0]);
        assert!(grid_order(&dup, &[0, 1]).is_err());
    }
}

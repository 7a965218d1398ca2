//! load → split → transforms (train only) → chunk → optimize → document,
//! and the predict/eval/diagnose stages that consume a document.

use std::path::Path;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use gpframe::data::{chunk, load_csv, split, Dataset, PredictionRow, Splits};
use gpframe::eval::{
    compute_metrics, knn_predict, residual_diagnostics, Comparison, LinearModel, MetricsReport, Predictive,
    ResidualDiagnostics,
};
use gpframe::gp::{fit_cache, log_marginal_likelihood, sample, GpModel, MeanFunction, PredictiveDistribution};
use gpframe::kernels::parse_kernel_expr;
use gpframe::scale::{fit_experts, init_inducing, svgp_fit, ExpertOptions};
use gpframe::train::{check_gradients, initialize_hyperparams, optimize, self_check, GradientReport, SelfCheckReport};
use gpframe::transforms::{ColumnTransform, TransformSpec};

use crate::config::{Baseline, MeanKind, PipelineConfig, ScaleSection, METRIC_NAMES};
use crate::model::{
    rows_of, ExpertState, Fitted, FittedState, KroneckerPredictor, ModelDocument, Predictor, RunSummary, TrainReport,
    TrainingData, FORMAT, VERSION,
};
use crate::CliError;

/// Reads the configured CSV after checking that every configured column is
/// in its header.
pub fn load_dataset(cfg: &PipelineConfig) -> Result<Dataset, CliError> {
    let d = &cfg.data;
    check_header(&d.path, cfg)?;
    Ok(load_csv(&d.path, &d.schema())?.dataset)
}

fn check_header(path: &Path, cfg: &PipelineConfig) -> Result<(), CliError> {
    use std::io::BufRead;
    let file = std::fs::File::open(path).map_err(|e| CliError::Data(format!("cannot read {}: {e}", path.display())))?;
    let mut first = String::new();
    std::io::BufReader::new(file)
        .read_line(&mut first)
        .map_err(|e| CliError::Data(format!("cannot read {}: {e}", path.display())))?;
    let header: Vec<&str> = first.trim_end().split(',').map(str::trim).collect();
    let d = &cfg.data;
    let wanted = d.features.iter().chain([&d.target]).chain(d.track.iter()).chain(d.row_id.iter());
    for col in wanted {
        if !header.contains(&col.as_str()) {
            return Err(CliError::Config(format!("column '{col}' not found in {}", path.display())));
        }
    }
    Ok(())
}

pub fn split_dataset(cfg: &PipelineConfig, ds: &Dataset) -> Result<Splits, CliError> {
    Ok(split(ds, &cfg.split.spec())?)
}

/// Loads, splits and fits; returns the fitted model and the splits.
pub fn fit(cfg: &PipelineConfig) -> Result<(Fitted, Splits), CliError> {
    let ds = load_dataset(cfg)?;
    let splits = split_dataset(cfg, &ds)?;
    let fitted = fit_on(cfg, &splits.train)?;
    Ok((fitted, splits))
}

fn overrides(cfg: &PipelineConfig) -> Vec<(String, f64)> {
    cfg.kernel.init.iter().map(|(k, v)| (k.clone(), *v)).collect()
}

fn set_param(model: &mut GpModel, name: &str, value: f64) -> Result<(), CliError> {
    let bad = || CliError::Config(format!("[kernel.init] '{name}' must be finite and positive"));
    if let Some(p) = model.kernel.param_mut(name) {
        if !(value > 0.0 && value.is_finite()) {
            return Err(bad());
        }
        p.set_value(value);
    } else if name == model.noise.name {
        if !(value >= 0.0 && value.is_finite()) {
            return Err(bad());
        }
        model.noise.set_value(value);
        if value == 0.0 {
            model.noise.learnable = false;
        }
    } else if let Some(i) = model.mean.param_names().iter().position(|n| n == name) {
        let mut v = model.mean.params();
        v[i] = value;
        model.mean.set_params(&v);
    } else {
        return Err(CliError::Config(format!("unknown parameter '{name}'")));
    }
    Ok(())
}

fn hyper_mut<'a>(model: &'a mut GpModel, name: &str) -> Result<&'a mut gpframe::kernels::HyperParam, CliError> {
    if name == model.noise.name {
        return Ok(&mut model.noise);
    }
    model.kernel.param_mut(name).ok_or_else(|| CliError::Config(format!("unknown parameter '{name}'")))
}

/// The untrained model described by the `[kernel]` and `[mean]` sections.
pub fn build_model(cfg: &PipelineConfig) -> Result<GpModel, CliError> {
    let k = &cfg.kernel;
    let mut kernel = parse_kernel_expr(&k.expr, &cfg.data.features)?;
    let n_leaves = kernel.leaves().len();
    for &leaf in &k.ard {
        if leaf >= n_leaves {
            return Err(CliError::Config(format!("[kernel] ard leaf {leaf} out of range (kernel has {n_leaves})")));
        }
        kernel.set_ard(leaf, true)?;
    }
    let d = cfg.data.features.len();
    let mean = match cfg.mean.kind {
        MeanKind::Zero => MeanFunction::Zero,
        MeanKind::Constant => MeanFunction::Constant { value: 0.0, learnable: cfg.mean.learnable },
        MeanKind::Linear => MeanFunction::Linear { weights: vec![0.0; d], intercept: 0.0, learnable: cfg.mean.learnable },
    };
    let mut model = GpModel::new(kernel, 1.0).with_mean(mean);
    for (name, value) in &k.init {
        set_param(&mut model, name, *value)?;
    }
    for (name, prior) in &k.priors {
        hyper_mut(&mut model, name)?.prior = Some(*prior);
    }
    for (name, [lo, hi]) in &k.bounds {
        let p = hyper_mut(&mut model, name)?;
        p.bounds = Some((*lo, *hi));
        p.project();
    }
    for name in &k.fixed {
        hyper_mut(&mut model, name)?.learnable = false;
    }
    Ok(model)
}

fn fit_transforms(cfg: &PipelineConfig, train: &Dataset) -> Result<TransformSpec, CliError> {
    let t = &cfg.transforms;
    let requests: Vec<_> = cfg
        .data
        .features
        .iter()
        .map(|f| t.columns.get(f).cloned().unwrap_or_else(|| t.inputs.clone()))
        .collect();
    Ok(TransformSpec::fit(&train.features, &cfg.data.features, &train.target, &requests, &t.target)?)
}

/// Seeded subset of row indices (all rows when `cap` is absent or large enough).
fn subsample(n: usize, cap: Option<usize>, seed: u64) -> Vec<usize> {
    use rand::seq::index::sample as pick;
    use rand::SeedableRng;
    match cap {
        Some(m) if m < n => {
            let mut idx = pick(&mut rand_chacha::ChaCha8Rng::seed_from_u64(seed), n, m).into_vec();
            idx.sort_unstable();
            idx
        }
        _ => (0..n).collect(),
    }
}

/// Initializes and optimizes `template` on (a subsample of) the data.
fn learn(
    cfg: &PipelineConfig,
    template: &GpModel,
    x: &DMatrix<f64>,
    y: &DVector<f64>,
    cap: Option<usize>,
) -> Result<(GpModel, RunSummary), CliError> {
    let rows = subsample(x.nrows(), cap, cfg.seed());
    let (xh, yh) = (x.select_rows(&rows), y.select_rows(&rows));
    let start = initialize_hyperparams(template, &xh, &yh, &overrides(cfg))?;
    let (model, trace) = optimize(&start, &xh, &yh, &cfg.train)?;
    Ok((model, RunSummary::from_trace("model", rows.len(), &trace)))
}

/// Fits transforms and the configured model on `train`.
pub fn fit_on(cfg: &PipelineConfig, train: &Dataset) -> Result<Fitted, CliError> {
    let spec = fit_transforms(cfg, train)?;
    let (x, y) = spec.for_training(&train.features, &train.target)?;
    let template = build_model(cfg)?;
    let n = x.nrows();
    let (fitted, predictor, report) = match &cfg.scale {
        ScaleSection::Exact { hyper_subsample } => {
            let (model, run) = learn(cfg, &template, &x, &y, *hyper_subsample)?;
            let cache = fit_cache(&model, &x, &y)?;
            let lml = log_marginal_likelihood(&cache);
            let report = TrainReport::new("exact", n, vec![run], Some(lml));
            (FittedState::Exact { model: model.clone() }, Predictor::Exact { model, cache }, report)
        }
        ScaleSection::Experts { chunking, sharing, aggregation, initialize } => {
            let chunks = chunk(train, chunking)?;
            let options = ExpertOptions {
                sharing: *sharing,
                aggregation: *aggregation,
                initialize: *initialize,
                overrides: overrides(cfg),
            };
            let ens = fit_experts(&x, &y, &chunks, &template, &cfg.train, &options)?;
            let sizes = chunks.sizes();
            let runs = if ens.traces.len() == ens.experts.len() {
                ens.experts
                    .iter()
                    .zip(&ens.traces)
                    .map(|(e, t)| RunSummary::from_trace(format!("chunk {}", e.chunk), sizes[e.chunk], t))
                    .collect()
            } else {
                ens.traces.iter().map(|t| RunSummary::from_trace("shared", n, t)).collect()
            };
            let state = FittedState::Experts {
                sharing: *sharing,
                aggregation: *aggregation,
                chunking: chunks.method.clone(),
                n_chunks: chunks.n_chunks,
                assignment: chunks.assignment.clone(),
                centroids: chunks.centroids.as_ref().map(rows_of),
                experts: ens.experts.iter().map(|e| ExpertState { chunk: e.chunk, model: e.model.clone() }).collect(),
                failures: ens.failures.clone(),
            };
            (state, Predictor::Experts(ens), TrainReport::new("experts", n, runs, None))
        }
        ScaleSection::Svgp { inducing, learn_inducing, kmeans_iters } => {
            let start = initialize_hyperparams(&template, &x, &y, &overrides(cfg))?;
            let z0 = init_inducing(&x, (*inducing).min(n), *kmeans_iters, cfg.seed())?;
            let (sgp, trace) = svgp_fit(&start, &x, &y, &z0, &cfg.train, *learn_inducing)?;
            let run = RunSummary::from_trace("model", n, &trace);
            let state = FittedState::Svgp { model: sgp.model.clone(), inducing: rows_of(&sgp.z), bound: sgp.bound };
            (state, Predictor::Svgp(sgp), TrainReport::new("svgp", n, vec![run], None))
        }
        ScaleSection::Kronecker { hyper_subsample } => {
            // fail on a malformed grid before spending time on optimization
            KroneckerPredictor::new(template.clone(), &x, &y)?;
            let (model, run) = learn(cfg, &template, &x, &y, *hyper_subsample)?;
            let (pred, axes) = KroneckerPredictor::new(model.clone(), &x, &y)?;
            let lml = pred.system.log_marginal_likelihood(&(y.clone() - model.mean.eval(&x)))?;
            let report = TrainReport::new("kronecker", n, vec![run], Some(lml));
            (FittedState::Kronecker { model, axes }, Predictor::Kronecker(pred), report)
        }
    };
    let doc = ModelDocument {
        format: FORMAT.into(),
        version: VERSION.into(),
        name: cfg.display_name(),
        seed: cfg.seed(),
        config: cfg.clone(),
        features: cfg.data.features.clone(),
        target: cfg.data.target.clone(),
        transforms: spec,
        training: TrainingData::new(train.row_ids.clone(), &x, &y),
        fitted,
        report,
    };
    Ok(Fitted { doc, predictor })
}

/// Predictions on the original target scale.
#[derive(Clone, Debug)]
pub struct Prediction {
    /// Marginals on the transformed scale.
    pub dist: PredictiveDistribution,
    pub predictive: Predictive,
    pub fallbacks: usize,
}

impl Fitted {
    pub fn transform_inputs(&self, x: &DMatrix<f64>) -> Result<DMatrix<f64>, CliError> {
        Ok(self.doc.transforms.transform_inputs(x)?)
    }

    /// Predicts at raw (untransformed) inputs.
    pub fn predict_raw(&self, x: &DMatrix<f64>) -> Result<Prediction, CliError> {
        let xt = self.transform_inputs(x)?;
        let raw = self.predictor.predict(&xt)?;
        let predictive = Predictive::transformed(&raw.dist, &self.doc.transforms.target);
        Ok(Prediction { dist: raw.dist, predictive, fallbacks: raw.fallbacks })
    }

    /// Rows of the predictions file. Intervals are quantile-mapped; standard
    /// deviations are mapped by the local slope of the inverse transform.
    pub fn prediction_rows(&self, row_ids: &[u64], p: &Prediction) -> Result<Vec<PredictionRow>, CliError> {
        let target = &self.doc.transforms.target;
        let intervals = target.inverse_predictive(&p.dist);
        row_ids
            .iter()
            .zip(intervals)
            .enumerate()
            .map(|(i, (&row_id, iv))| {
                let iv = iv?;
                let slope = (-target.log_jacobian(iv.median)).exp();
                Ok(PredictionRow {
                    row_id,
                    prediction: iv.median,
                    latent_std: p.dist.latent_var[i].sqrt() * slope,
                    obs_std: p.dist.obs_var[i].sqrt() * slope,
                    lower95: iv.lower,
                    upper95: iv.upper,
                })
            })
            .collect()
    }
}

/// Which labelled rows to evaluate on.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EvalSet {
    Train,
    Validation,
    Test,
    External,
}

impl EvalSet {
    pub fn parse(s: &str) -> Result<Self, CliError> {
        match s {
            "train" => Ok(EvalSet::Train),
            "validation" | "val" => Ok(EvalSet::Validation),
            "test" => Ok(EvalSet::Test),
            other => Err(CliError::Config(format!("unknown split '{other}' (expected train, validation or test)"))),
        }
    }

    pub fn label(self) -> &'static str {
        match self {
            EvalSet::Train => "train",
            EvalSet::Validation => "validation",
            EvalSet::Test => "test",
            EvalSet::External => "external",
        }
    }
}

/// Reproduces the document's split and returns the requested part. The test
/// part is only released with `unlock_test`. The training part must match
/// the fingerprint stored with the transforms.
pub fn eval_rows(doc: &ModelDocument, set: EvalSet, unlock_test: bool) -> Result<Dataset, CliError> {
    if set == EvalSet::Test && !unlock_test {
        return Err(CliError::Config(
            "the test split is held out from iteration; pass --unlock-test to evaluate on it".into(),
        ));
    }
    let ds = load_dataset(&doc.config)?;
    let splits = split_dataset(&doc.config, &ds)?;
    if splits.train.row_ids != doc.training.row_ids {
        return Err(CliError::Data("data no longer reproduce the document's training split".into()));
    }
    Ok(match set {
        EvalSet::Train => splits.train,
        EvalSet::Validation => splits.val,
        EvalSet::Test => splits.test,
        EvalSet::External => unreachable!("external rows are loaded by the caller"),
    })
}

/// Loads an external labelled CSV with the document's schema.
pub fn external_rows(doc: &ModelDocument, path: &Path) -> Result<Dataset, CliError> {
    let mut cfg = doc.config.clone();
    cfg.data.path = path.to_path_buf();
    load_dataset(&cfg)
}

/// The GP's metrics, with BIC for exact models.
pub fn model_metrics(fitted: &Fitted, data: &Dataset) -> Result<(MetricsReport, Prediction), CliError> {
    let p = fitted.predict_raw(&data.features)?;
    let mut r = compute_metrics(data.target.as_slice(), &p.predictive)?;
    if let (FittedState::Exact { model }, Some(lml)) = (&fitted.doc.fitted, fitted.doc.report.lml) {
        r = r.with_bic(lml, model.n_learnable(), fitted.doc.training.row_ids.len());
    }
    Ok((r, p))
}

/// k-NN and linear-regression predictions from the document's training rows
/// (transformed inputs, original-scale targets).
pub fn baseline_predictions(
    doc: &ModelDocument,
    x_eval: &DMatrix<f64>,
    which: &[Baseline],
    k: usize,
) -> Result<Vec<(String, Predictive)>, CliError> {
    let (xt, yt) = doc.training.matrices();
    let y = DVector::from_vec(doc.transforms.target.inverse(yt.as_slice())?);
    let xs = doc.transforms.transform_inputs(x_eval)?;
    let mut out = Vec::new();
    for b in which {
        match b {
            Baseline::Knn => {
                let k = k.min(xt.nrows());
                out.push((format!("knn (k={k})"), Predictive::Point(knn_predict(&xt, &y, &xs, k)?)));
            }
            Baseline::Linear => {
                let lm = LinearModel::fit(&xt, &y, &doc.features)?;
                out.push(("linear".to_string(), Predictive::Point(lm.predict(&xs))));
            }
        }
    }
    Ok(out)
}

/// The evaluation report: metrics per model, ranks and the config snapshot.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Report {
    pub format: String,
    pub version: String,
    pub split: EvalSet,
    /// Reminder of what the split is for.
    pub note: String,
    pub tail_convention: String,
    pub config: PipelineConfig,
    pub models: serde_json::Map<String, serde_json::Value>,
    pub ranks: serde_json::Map<String, serde_json::Value>,
    /// Expert-aggregation prior fallbacks per model, where any occurred.
    #[serde(default, skip_serializing_if = "serde_json::Map::is_empty")]
    pub fallbacks: serde_json::Map<String, serde_json::Value>,
    #[serde(skip)]
    pub table: String,
}

fn split_note(set: EvalSet) -> String {
    match set {
        EvalSet::Train => "training rows: in-sample fit, not a measure of generalization",
        EvalSet::Validation => "validation rows: used for model iteration",
        EvalSet::Test => "test rows: held out from iteration",
        EvalSet::External => "external labelled file",
    }
    .into()
}

/// Builds a report for several named reports on one split.
pub fn build_report(
    cfg: &PipelineConfig,
    set: EvalSet,
    reports: Vec<(String, MetricsReport)>,
    fallbacks: Vec<(String, usize)>,
) -> Report {
    let keep = |name: &str| name == "n" || cfg.eval.metrics.is_empty() || cfg.eval.metrics.iter().any(|m| m == name);
    let comparison = Comparison::from_reports(reports);
    let mut models = serde_json::Map::new();
    for (name, r) in &comparison.reports {
        let serde_json::Value::Object(fields) = serde_json::to_value(r).expect("metrics serialize") else {
            unreachable!()
        };
        let fields: serde_json::Map<_, _> = fields.into_iter().filter(|(k, _)| keep(k) || !METRIC_NAMES.contains(&k.as_str())).collect();
        models.insert(name.clone(), serde_json::Value::Object(fields));
    }
    let mut ranks = serde_json::Map::new();
    for (metric, r) in &comparison.ranks {
        if keep(metric) {
            let by_model: serde_json::Map<_, _> = comparison
                .reports
                .iter()
                .zip(r)
                .map(|((name, _), rank)| (name.clone(), serde_json::json!(rank)))
                .collect();
            ranks.insert(metric.clone(), serde_json::Value::Object(by_model));
        }
    }
    Report {
        format: "gpframe-report".into(),
        version: VERSION.into(),
        split: set,
        note: split_note(set),
        tail_convention: "rmse_p5 / rmse_p95: RMSE over the rows whose true target is in the lowest / highest 5%".into(),
        config: cfg.clone(),
        models,
        ranks,
        fallbacks: fallbacks.into_iter().filter(|(_, n)| *n > 0).map(|(k, n)| (k, serde_json::json!(n))).collect(),
        table: format!("split: {}\n{}", set.label(), comparison.to_table()),
    }
}

impl Report {
    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("report serializes");
        s.push('\n');
        s
    }
}

/// Evaluates one or more fitted models (plus the first model's configured
/// baselines). `rows[i]` holds the evaluation rows under model `i`'s schema;
/// all of them must be the same rows with the same targets.
pub fn evaluate(models: &[Fitted], rows: &[Dataset], set: EvalSet) -> Result<Report, CliError> {
    let first = models.first().ok_or_else(|| CliError::Config("no model to evaluate".into()))?;
    if rows.len() != models.len() {
        return Err(CliError::Config(format!("{} row sets for {} models", rows.len(), models.len())));
    }
    let data = &rows[0];
    for (m, other) in models.iter().zip(rows).skip(1) {
        if other.row_ids != data.row_ids || other.target != data.target {
            return Err(CliError::Data(format!("model '{}' evaluates on different rows", m.doc.name)));
        }
    }
    let mut reports = Vec::new();
    let mut fallbacks = Vec::new();
    for (m, data) in models.iter().zip(rows) {
        let (r, p) = model_metrics(m, data)?;
        reports.push((m.doc.name.clone(), r));
        fallbacks.push((m.doc.name.clone(), p.fallbacks));
    }
    let cfg = &first.doc.config;
    for (name, p) in baseline_predictions(&first.doc, &data.features, &cfg.eval.baselines, cfg.eval.knn_k)? {
        reports.push((name, compute_metrics(data.target.as_slice(), &p)?));
    }
    let mut seen = std::collections::BTreeSet::new();
    for (name, _) in &reports {
        if !seen.insert(name.clone()) {
            return Err(CliError::Config(format!("two models are named '{name}'; set `name` in their configs")));
        }
    }
    Ok(build_report(cfg, set, reports, fallbacks))
}

/// Baselines alone, fitted on the config's training split.
pub fn baseline_report(cfg: &PipelineConfig, set: EvalSet, unlock_test: bool) -> Result<Report, CliError> {
    if set == EvalSet::Test && !unlock_test {
        return Err(CliError::Config(
            "the test split is held out from iteration; pass --unlock-test to evaluate on it".into(),
        ));
    }
    let ds = load_dataset(cfg)?;
    let splits = split_dataset(cfg, &ds)?;
    let spec = fit_transforms(cfg, &splits.train)?;
    let (x, y) = spec.for_training(&splits.train.features, &splits.train.target)?;
    let data = match set {
        EvalSet::Train => &splits.train,
        EvalSet::Validation => &splits.val,
        _ => &splits.test,
    };
    // only the training rows and transforms of the document are used
    let doc = ModelDocument {
        format: FORMAT.into(),
        version: VERSION.into(),
        name: "baselines".into(),
        seed: cfg.seed(),
        config: cfg.clone(),
        features: cfg.data.features.clone(),
        target: cfg.data.target.clone(),
        transforms: spec,
        training: TrainingData::new(splits.train.row_ids.clone(), &x, &y),
        fitted: FittedState::Exact { model: build_model(cfg)? },
        report: TrainReport::new("none", x.nrows(), vec![], None),
    };
    let mut reports = Vec::new();
    for (name, p) in baseline_predictions(&doc, &data.features, &cfg.eval.baselines, cfg.eval.knn_k)? {
        reports.push((name, compute_metrics(data.target.as_slice(), &p)?));
    }
    Ok(build_report(cfg, set, reports, vec![]))
}

pub const SAMPLE_PATHS: usize = 5;
pub const SLICE_POINTS: usize = 100;
/// Rows used for gradient checks, self-checks and sample-path conditioning.
pub const DIAGNOSE_ROWS: usize = 500;
const CONDITION_ROWS: usize = 2000;
const SELF_CHECK_TOL: f64 = 0.3;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SamplePaths {
    pub feature: String,
    /// Slice coordinates on the original scale.
    pub grid: Vec<f64>,
    /// Values of the other features (training medians, original scale).
    pub fixed: Vec<(String, f64)>,
    /// Posterior draws of the latent function, back-transformed.
    pub paths: Vec<Vec<f64>>,
    /// Which exact GP the paths were drawn from.
    pub source: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Diagnostics {
    pub format: String,
    pub version: String,
    pub model: String,
    pub split: EvalSet,
    pub residuals: ResidualDiagnostics,
    pub samples: SamplePaths,
    pub gradients: GradientReport,
    pub self_check: SelfCheckReport,
}

fn median(mut v: Vec<f64>) -> f64 {
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

/// An exact GP standing in for the fitted model where joint draws are
/// needed, with its (transformed) conditioning data.
fn representative(fitted: &Fitted, near: &DMatrix<f64>) -> (GpModel, DMatrix<f64>, DVector<f64>, String) {
    let (x, y) = fitted.doc.training.matrices();
    let seed = fitted.doc.seed;
    let capped = |model: &GpModel, label: &str| {
        let rows = subsample(x.nrows(), Some(CONDITION_ROWS), seed);
        let source = if rows.len() < x.nrows() {
            format!("{label} conditioned on {} of {} training rows", rows.len(), x.nrows())
        } else {
            label.to_string()
        };
        (model.clone(), x.select_rows(&rows), y.select_rows(&rows), source)
    };
    match &fitted.predictor {
        Predictor::Exact { model, .. } => capped(model, "exact model"),
        Predictor::Svgp(s) => capped(&s.model, "sparse model hyperparameters, exact posterior"),
        Predictor::Kronecker(k) => capped(&k.model, "kronecker model hyperparameters, exact posterior"),
        Predictor::Experts(ens) => {
            // the expert owning the training row nearest the slice midpoint
            let mid = near.row(near.nrows() / 2);
            let nearest = (0..x.nrows())
                .min_by(|&a, &b| (x.row(a) - mid).norm_squared().total_cmp(&(x.row(b) - mid).norm_squared()))
                .unwrap_or(0);
            let chunk = ens.chunking.assignment[nearest];
            let e = ens.experts.iter().find(|e| e.chunk == chunk).unwrap_or(&ens.experts[0]);
            let rows = &ens.chunking.members()[e.chunk];
            (e.model.clone(), x.select_rows(rows), y.select_rows(rows), format!("expert for chunk {}", e.chunk))
        }
    }
}

/// Residual diagnostics on `data`, posterior sample paths along `feature`,
/// a gradient check and a synthetic-data self-check.
pub fn diagnose(fitted: &Fitted, data: &Dataset, set: EvalSet, feature: Option<&str>) -> Result<Diagnostics, CliError> {
    let doc = &fitted.doc;
    let p = fitted.predict_raw(&data.features)?;
    let residuals = residual_diagnostics(data.target.as_slice(), &p.predictive, &data.features, &doc.features)?;

    let j = match feature {
        Some(f) => doc.features.iter().position(|n| n == f).ok_or_else(|| CliError::Config(format!("unknown feature '{f}'")))?,
        None => 0,
    };
    // original-scale training inputs, recovered through the input transforms
    let (xt, _) = doc.training.matrices();
    let raw_col = |c: usize| -> Vec<f64> {
        let t: &ColumnTransform = &doc.transforms.inputs[c].1;
        xt.column(c).iter().map(|&v| t.inverse_one(v).unwrap_or(v)).collect()
    };
    let col = raw_col(j);
    let (lo, hi) = col.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), &v| (a.min(v), b.max(v)));
    let grid: Vec<f64> = (0..SLICE_POINTS).map(|i| lo + (hi - lo) * i as f64 / (SLICE_POINTS - 1) as f64).collect();
    let fixed: Vec<(String, f64)> =
        (0..doc.features.len()).filter(|&c| c != j).map(|c| (doc.features[c].clone(), median(raw_col(c)))).collect();
    let slice = DMatrix::from_fn(SLICE_POINTS, doc.features.len(), |i, c| {
        if c == j {
            grid[i]
        } else {
            fixed.iter().find(|(n, _)| *n == doc.features[c]).map_or(0.0, |f| f.1)
        }
    });
    let slice_t = fitted.transform_inputs(&slice)?;
    let (model, xc, yc, source) = representative(fitted, &slice_t);
    let cache = fit_cache(&model, &xc, &yc)?;
    let draws = sample(&model, &slice_t, SAMPLE_PATHS, doc.seed, Some(&cache))?;
    let target = &doc.transforms.target;
    let paths =
        draws.row_iter().map(|r| r.iter().map(|&v| target.inverse_one(v).unwrap_or(f64::NAN)).collect()).collect();

    let rows = subsample(xc.nrows(), Some(DIAGNOSE_ROWS), doc.seed);
    let (xd, yd) = (xc.select_rows(&rows), yc.select_rows(&rows));
    let gradients = check_gradients(&model, &xd, &yd)?;
    let self_check = self_check(&model, &xd, doc.seed, &doc.config.train, SELF_CHECK_TOL)?;

    Ok(Diagnostics {
        format: "gpframe-diagnostics".into(),
        version: VERSION.into(),
        model: doc.name.clone(),
        split: set,
        residuals,
        samples: SamplePaths { feature: doc.features[j].clone(), grid, fixed, paths, source },
        gradients,
        self_check,
    })
}

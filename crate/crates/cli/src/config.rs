//! Pipeline configuration, read from TOML.
//!
//! ```toml
//! name = "framework"
//! seed = 0
//!
//! [data]
//! path = "glacier.csv"
//! features = ["x", "y", "elev", "ocean_dist"]
//! target = "elev_change"
//! track = "track_id"
//!
//! [split]
//! fractions = [0.7, 0.1, 0.2]
//! unit = "by_track"
//!
//! [transforms]
//! inputs = ["zscore"]
//! target = ["zscore"]
//! [transforms.columns]
//! elev = ["zscore"]
//!
//! [kernel]
//! expr = "Mat32(x,y,elev) + Mat32(ocean_dist)"
//! ard = [0]
//! fixed = []
//! [kernel.init]
//! "mat32_1.lengthscale" = 1.0
//! [kernel.priors]
//! noise = { mean = -4.0, std = 2.0 }
//! [kernel.bounds]
//! noise = [1e-6, 10.0]
//!
//! [mean]
//! kind = "zero"
//!
//! [train]
//! learning_rate = 0.05
//! epochs = 150
//! restarts = 3
//!
//! [scale]
//! mode = "experts"
//! chunking = { method = "k_means", features = ["x", "y"], k = 16 }
//!
//! [eval]
//! baselines = ["knn", "linear"]
//! ```
//!
//! Every section except `[data]` and `[kernel]` may be omitted.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use gpframe::data::{ChunkMethod, CsvSchema, SplitSpec, SplitUnit};
use gpframe::kernels::GaussianPrior;
use gpframe::scale::{Aggregation, Sharing};
use gpframe::train::TrainConfig;
use gpframe::transforms::StepKind;
use serde::{Deserialize, Serialize};

use crate::CliError;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PipelineConfig {
    /// Label used in reports; defaults to the kernel expression.
    #[serde(default)]
    pub name: Option<String>,
    /// Master seed. When set it overrides the split, training and chunking seeds.
    #[serde(default)]
    pub seed: Option<u64>,
    pub data: DataSection,
    #[serde(default)]
    pub split: SplitSection,
    #[serde(default)]
    pub transforms: TransformSection,
    pub kernel: KernelSection,
    #[serde(default)]
    pub mean: MeanSection,
    #[serde(default)]
    pub train: TrainConfig,
    #[serde(default)]
    pub scale: ScaleSection,
    #[serde(default)]
    pub eval: EvalSection,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataSection {
    /// Relative paths are resolved against the config file's directory.
    pub path: PathBuf,
    pub features: Vec<String>,
    pub target: String,
    #[serde(default)]
    pub track: Option<String>,
    #[serde(default)]
    pub row_id: Option<String>,
}

impl DataSection {
    pub fn schema(&self) -> CsvSchema {
        CsvSchema {
            features: self.features.clone(),
            target: self.target.clone(),
            track: self.track.clone(),
            row_id: self.row_id.clone(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SplitSection {
    pub fractions: [f64; 3],
    pub unit: SplitUnit,
    pub seed: u64,
}

impl Default for SplitSection {
    fn default() -> Self {
        let d = SplitSpec::default();
        Self { fractions: d.fractions, unit: d.unit, seed: d.seed }
    }
}

impl SplitSection {
    pub fn spec(&self) -> SplitSpec {
        SplitSpec { fractions: self.fractions, unit: self.unit, seed: self.seed }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize, Default)]
#[serde(default, deny_unknown_fields)]
pub struct TransformSection {
    /// Steps for every input column without its own entry.
    pub inputs: Vec<StepKind>,
    /// Per-column steps, by feature name.
    pub columns: BTreeMap<String, Vec<StepKind>>,
    pub target: Vec<StepKind>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct KernelSection {
    pub expr: String,
    /// Leaves (in expression order) with one lengthscale per feature.
    #[serde(default)]
    pub ard: Vec<usize>,
    /// Initial values by parameter name; applied after data-driven initialization.
    #[serde(default)]
    pub init: BTreeMap<String, f64>,
    /// Parameters held at their initial value.
    #[serde(default)]
    pub fixed: Vec<String>,
    /// Gaussian priors on log-values.
    #[serde(default)]
    pub priors: BTreeMap<String, GaussianPrior>,
    #[serde(default)]
    pub bounds: BTreeMap<String, [f64; 2]>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum MeanKind {
    #[default]
    Zero,
    Constant,
    Linear,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MeanSection {
    pub kind: MeanKind,
    pub learnable: bool,
}

impl Default for MeanSection {
    fn default() -> Self {
        Self { kind: MeanKind::Zero, learnable: true }
    }
}

fn yes() -> bool {
    true
}

fn default_inducing() -> usize {
    1000
}

fn default_inducing_iters() -> usize {
    20
}

fn default_grid_subsample() -> Option<usize> {
    Some(1000)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "mode", rename_all = "snake_case", deny_unknown_fields)]
pub enum ScaleSection {
    Exact {
        /// Learn hyperparameters on a seeded subsample of this many training
        /// rows, then condition on all of them.
        #[serde(default)]
        hyper_subsample: Option<usize>,
    },
    Experts {
        chunking: ChunkMethod,
        #[serde(default)]
        sharing: Sharing,
        #[serde(default)]
        aggregation: Aggregation,
        #[serde(default = "yes")]
        initialize: bool,
    },
    Svgp {
        #[serde(default = "default_inducing")]
        inducing: usize,
        #[serde(default = "yes")]
        learn_inducing: bool,
        #[serde(default = "default_inducing_iters")]
        kmeans_iters: usize,
    },
    Kronecker {
        #[serde(default = "default_grid_subsample")]
        hyper_subsample: Option<usize>,
    },
}

impl Default for ScaleSection {
    fn default() -> Self {
        ScaleSection::Exact { hyper_subsample: None }
    }
}

impl ScaleSection {
    pub fn mode(&self) -> &'static str {
        match self {
            ScaleSection::Exact { .. } => "exact",
            ScaleSection::Experts { .. } => "experts",
            ScaleSection::Svgp { .. } => "svgp",
            ScaleSection::Kronecker { .. } => "kronecker",
        }
    }
}

pub const METRIC_NAMES: [&str; 8] = ["rmse", "rmse_p5", "rmse_p95", "r2", "mll", "mae", "bias", "bic"];

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Baseline {
    Knn,
    Linear,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalSection {
    /// Metrics written to reports; all when empty.
    pub metrics: Vec<String>,
    /// Report file names inside the output directory.
    pub report: String,
    pub table: String,
    pub baselines: Vec<Baseline>,
    pub knn_k: usize,
}

impl Default for EvalSection {
    fn default() -> Self {
        Self {
            metrics: Vec::new(),
            report: "report.json".into(),
            table: "report.txt".into(),
            baselines: vec![Baseline::Knn, Baseline::Linear],
            knn_k: gpframe::eval::DEFAULT_KNN_K,
        }
    }
}

impl PipelineConfig {
    pub fn from_toml(text: &str) -> Result<Self, CliError> {
        let cfg: Self = toml::from_str(text).map_err(|e| CliError::Config(e.message().to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Reads a config file and resolves the data path against its directory.
    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::Config(format!("cannot read config {}: {e}", path.display())))?;
        let mut cfg = Self::from_toml(&text)?;
        if cfg.data.path.is_relative() {
            if let Some(dir) = path.parent() {
                cfg.data.path = dir.join(&cfg.data.path);
            }
        }
        Ok(cfg)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    /// Applies a master seed to every seeded stage.
    pub fn apply_seed(&mut self, seed: Option<u64>) {
        if let Some(s) = seed.or(self.seed) {
            self.seed = Some(s);
            self.split.seed = s;
            self.train.seed = s;
            if let ScaleSection::Experts { chunking: ChunkMethod::KMeans { seed, .. }, .. } = &mut self.scale {
                *seed = s;
            }
        }
    }

    pub fn seed(&self) -> u64 {
        self.seed.unwrap_or(self.train.seed)
    }

    pub fn display_name(&self) -> String {
        self.name.clone().unwrap_or_else(|| self.kernel.expr.clone())
    }

    /// Checks that the config is internally consistent. Column existence is
    /// checked against the CSV header when data are loaded.
    pub fn validate(&self) -> Result<(), CliError> {
        let bad = |m: String| Err(CliError::Config(m));
        if self.data.features.is_empty() {
            return bad("[data] features is empty".into());
        }
        for (i, f) in self.data.features.iter().enumerate() {
            if self.data.features[..i].contains(f) {
                return bad(format!("[data] feature '{f}' listed twice"));
            }
        }
        for name in self.transforms.columns.keys() {
            if !self.data.features.contains(name) {
                return bad(format!("[transforms.columns] '{name}' is not a configured feature"));
            }
        }
        for m in &self.eval.metrics {
            if !METRIC_NAMES.contains(&m.as_str()) {
                return bad(format!("[eval] unknown metric '{m}'"));
            }
        }
        for (name, [lo, hi]) in &self.kernel.bounds {
            if !(*lo > 0.0 && lo <= hi && hi.is_finite()) {
                return bad(format!("[kernel.bounds] '{name}' must satisfy 0 < lo <= hi"));
            }
        }
        for (name, p) in &self.kernel.priors {
            if !(p.std > 0.0 && p.std.is_finite() && p.mean.is_finite()) {
                return bad(format!("[kernel.priors] '{name}' needs a finite mean and positive std"));
            }
        }
        for name in &self.kernel.fixed {
            if !self.kernel.init.contains_key(name) {
                return bad(format!("[kernel] fixed parameter '{name}' needs a value in [kernel.init]"));
            }
        }
        if self.eval.knn_k == 0 {
            return bad("[eval] knn_k must be at least 1".into());
        }
        self.train.validate().map_err(|e| CliError::Config(e.to_string()))?;
        match &self.scale {
            ScaleSection::Experts { chunking, .. } => {
                if chunking.features().is_empty() {
                    return bad("[scale.chunking] features is empty".into());
                }
                for f in chunking.features() {
                    if !self.data.features.contains(f) {
                        return bad(format!("[scale.chunking] '{f}' is not a configured feature"));
                    }
                }
                match chunking {
                    ChunkMethod::KMeans { k, .. } if *k == 0 => return bad("[scale.chunking] k must be at least 1".into()),
                    ChunkMethod::Grid { features, tile_size } => {
                        if !(tile_size.len() == 1 || tile_size.len() == features.len()) {
                            return bad("[scale.chunking] tile_size needs one entry or one per feature".into());
                        }
                        if tile_size.iter().any(|t| !(*t > 0.0 && t.is_finite())) {
                            return bad("[scale.chunking] tile_size must be positive".into());
                        }
                    }
                    _ => {}
                }
            }
            ScaleSection::Svgp { inducing, .. } if *inducing == 0 => {
                return bad("[scale] inducing must be at least 1".into());
            }
            ScaleSection::Exact { hyper_subsample: Some(0) } | ScaleSection::Kronecker { hyper_subsample: Some(0) } => {
                return bad("[scale] hyper_subsample must be at least 1".into());
            }
            _ => {}
        }
        Ok(())
    }
}

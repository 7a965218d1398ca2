//! Datasets, CSV ingestion, track-based splitting, spatial chunking and the
//! synthetic glacier generator.

mod chunk;
mod io;
mod split;
mod synth;

use nalgebra::{DMatrix, DVector};
use thiserror::Error;

pub use chunk::{chunk, kmeans, ChunkMethod, Chunking, KMeansResult, DEFAULT_KMEANS_ITERS};
pub use io::{load_csv, load_inputs, save_dataset, save_predictions, CsvSchema, InputTable, Loaded, PredictionRow};
pub use split::{split, SplitSpec, SplitUnit, Splits};
pub use synth::{synthesize_glacier, GlacierParams, GLACIER, GLACIER_FEATURES};

#[derive(Debug, Clone, PartialEq, Error)]
pub enum DataError {
    #[error("cannot read {path}: {message}")]
    Io { path: String, message: String },
    #[error("missing column '{0}'")]
    MissingColumn(String),
    #[error("parse error at data row {row}, column '{column}': {message}")]
    ParseError { row: usize, column: String, message: String },
    #[error("dataset is empty")]
    EmptyDataset,
    #[error("split by track requires a track id column")]
    MissingTrackIds,
    #[error("need at least 3 split units, found {0}")]
    TooFewTracks(usize),
    #[error("invalid split fractions {0:?}: must be positive and sum to 1")]
    InvalidFractions([f64; 3]),
    #[error("k = {k} exceeds the {n} available points")]
    KTooLarge { k: usize, n: usize },
    #[error("chunking needs at least one spatial feature")]
    NoSpatialFeatures,
    #[error("invalid chunking: {0}")]
    InvalidChunking(String),
    #[error("duplicate feature name '{0}'")]
    DuplicateFeature(String),
}

/// Features, target and bookkeeping columns for a set of rows.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub features: DMatrix<f64>,
    pub feature_names: Vec<String>,
    pub target: DVector<f64>,
    pub track_id: Option<Vec<i64>>,
    pub row_ids: Vec<u64>,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.target.len()
    }

    pub fn is_empty(&self) -> bool {
        self.target.is_empty()
    }

    pub fn n_features(&self) -> usize {
        self.feature_names.len()
    }

    pub fn feature_index(&self, name: &str) -> Result<usize, DataError> {
        self.feature_names
            .iter()
            .position(|f| f == name)
            .ok_or_else(|| DataError::MissingColumn(name.to_string()))
    }

    /// Rows `idx`, in the given order.
    pub fn subset(&self, idx: &[usize]) -> Dataset {
        Dataset {
            features: self.features.select_rows(idx),
            feature_names: self.feature_names.clone(),
            target: self.target.select_rows(idx),
            track_id: self.track_id.as_ref().map(|t| idx.iter().map(|&i| t[i]).collect()),
            row_ids: idx.iter().map(|&i| self.row_ids[i]).collect(),
        }
    }

    /// Keeps only the named feature columns, in the given order.
    pub fn select_features(&self, names: &[String]) -> Result<Dataset, DataError> {
        let cols = names.iter().map(|n| self.feature_index(n)).collect::<Result<Vec<_>, _>>()?;
        Ok(Dataset {
            features: self.features.select_columns(&cols),
            feature_names: names.to_vec(),
            ..self.clone()
        })
    }

    /// A seeded random subset of `n` rows, kept in their original order.
    pub fn sample_rows(&self, n: usize, seed: u64) -> Dataset {
        use rand::seq::SliceRandom;
        use rand::SeedableRng;
        if n >= self.len() {
            return self.clone();
        }
        let mut idx: Vec<usize> = (0..self.len()).collect();
        idx.shuffle(&mut rand_chacha::ChaCha8Rng::seed_from_u64(seed));
        idx.truncate(n);
        idx.sort_unstable();
        self.subset(&idx)
    }
}

use std::collections::BTreeMap;

use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{DataError, Dataset};

pub const DEFAULT_KMEANS_ITERS: usize = 100;

fn default_iters() -> usize {
    DEFAULT_KMEANS_ITERS
}

/// How rows are grouped into chunks. Both methods work on the named spatial
/// features only.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "method", rename_all = "snake_case", deny_unknown_fields)]
pub enum ChunkMethod {
    /// Square cells: `floor(coord / tile)` per feature. A single tile size is
    /// used for every feature.
    Grid { features: Vec<String>, tile_size: Vec<f64> },
    KMeans {
        features: Vec<String>,
        k: usize,
        #[serde(default = "default_iters")]
        max_iter: usize,
        #[serde(default)]
        seed: u64,
    },
}

impl ChunkMethod {
    pub fn features(&self) -> &[String] {
        match self {
            ChunkMethod::Grid { features, .. } | ChunkMethod::KMeans { features, .. } => features,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Chunking {
    pub method: ChunkMethod,
    /// Chunk id per row, in `0..n_chunks`.
    pub assignment: Vec<usize>,
    pub n_chunks: usize,
    /// Within-chunk sum of squares (k-means only).
    pub inertia: Option<f64>,
    pub centroids: Option<DMatrix<f64>>,
}

impl Chunking {
    /// Row indices of each chunk, ascending.
    pub fn members(&self) -> Vec<Vec<usize>> {
        let mut out = vec![Vec::new(); self.n_chunks];
        for (i, &c) in self.assignment.iter().enumerate() {
            out[c].push(i);
        }
        out
    }

    pub fn sizes(&self) -> Vec<usize> {
        self.members().iter().map(Vec::len).collect()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct KMeansResult {
    pub assignment: Vec<usize>,
    /// One row per non-empty cluster.
    pub centroids: DMatrix<f64>,
    pub inertia: f64,
    /// Inertia after every assignment step.
    pub history: Vec<f64>,
    pub iterations: usize,
}

fn sq_dist(x: &DMatrix<f64>, i: usize, c: &DMatrix<f64>, j: usize) -> f64 {
    (0..x.ncols()).map(|d| (x[(i, d)] - c[(j, d)]).powi(2)).sum()
}

fn plus_plus(x: &DMatrix<f64>, k: usize, rng: &mut ChaCha8Rng) -> DMatrix<f64> {
    let n = x.nrows();
    let mut centers = DMatrix::zeros(k, x.ncols());
    let mut chosen = vec![false; n];
    let first = rng.random_range(0..n);
    chosen[first] = true;
    centers.set_row(0, &x.row(first));
    let mut d2: Vec<f64> = (0..n).map(|i| sq_dist(x, i, &centers, 0)).collect();
    for c in 1..k {
        let total: f64 = d2.iter().sum();
        let pick = if total > 0.0 {
            let target = rng.random::<f64>() * total;
            let mut acc = 0.0;
            let mut pick = n - 1;
            for (i, &w) in d2.iter().enumerate() {
                acc += w;
                if acc > target && w > 0.0 {
                    pick = i;
                    break;
                }
            }
            while d2[pick] == 0.0 {
                pick -= 1;
            }
            pick
        } else {
            let free: Vec<usize> = (0..n).filter(|&i| !chosen[i]).collect();
            free[rng.random_range(0..free.len())]
        };
        chosen[pick] = true;
        centers.set_row(c, &x.row(pick));
        for (i, d) in d2.iter_mut().enumerate() {
            *d = d.min(sq_dist(x, i, &centers, c));
        }
    }
    centers
}

fn assign(x: &DMatrix<f64>, centers: &DMatrix<f64>, out: &mut [usize]) -> f64 {
    let mut inertia = 0.0;
    for (i, a) in out.iter_mut().enumerate() {
        let mut best = (f64::INFINITY, 0);
        for j in 0..centers.nrows() {
            let d = sq_dist(x, i, centers, j);
            if d < best.0 {
                best = (d, j);
            }
        }
        *a = best.1;
        inertia += best.0;
    }
    inertia
}

/// Lloyd's algorithm from a seeded k-means++ start. Stops when assignments
/// stop changing or after `max_iter` updates. Empty clusters are dropped
/// from the result and ids compacted.
pub fn kmeans(x: &DMatrix<f64>, k: usize, max_iter: usize, seed: u64) -> Result<KMeansResult, DataError> {
    let n = x.nrows();
    if n == 0 {
        return Err(DataError::EmptyDataset);
    }
    if k == 0 {
        return Err(DataError::InvalidChunking("k must be at least 1".into()));
    }
    if k > n {
        return Err(DataError::KTooLarge { k, n });
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut centers = plus_plus(x, k, &mut rng);
    let mut labels = vec![usize::MAX; n];
    let mut next = vec![0; n];
    let mut history = Vec::new();
    let mut iterations = 0;
    loop {
        history.push(assign(x, &centers, &mut next));
        if next == labels || iterations == max_iter {
            labels.copy_from_slice(&next);
            break;
        }
        labels.copy_from_slice(&next);
        iterations += 1;
        let mut sums = DMatrix::<f64>::zeros(k, x.ncols());
        let mut counts = vec![0usize; k];
        for (i, &c) in labels.iter().enumerate() {
            counts[c] += 1;
            for d in 0..x.ncols() {
                sums[(c, d)] += x[(i, d)];
            }
        }
        for c in 0..k {
            if counts[c] > 0 {
                for d in 0..x.ncols() {
                    centers[(c, d)] = sums[(c, d)] / counts[c] as f64;
                }
            }
        }
    }
    let mut remap = vec![usize::MAX; k];
    let mut kept = Vec::new();
    for &c in &labels {
        if remap[c] == usize::MAX {
            remap[c] = 0;
        }
    }
    for c in 0..k {
        if remap[c] != usize::MAX {
            remap[c] = kept.len();
            kept.push(c);
        }
    }
    let assignment: Vec<usize> = labels.iter().map(|&c| remap[c]).collect();
    let centroids = centers.select_rows(&kept);
    let inertia = *history.last().unwrap();
    Ok(KMeansResult { assignment, centroids, inertia, history, iterations })
}

fn spatial(ds: &Dataset, features: &[String]) -> Result<DMatrix<f64>, DataError> {
    if features.is_empty() {
        return Err(DataError::NoSpatialFeatures);
    }
    let cols = features.iter().map(|f| ds.feature_index(f)).collect::<Result<Vec<_>, _>>()?;
    Ok(ds.features.select_columns(&cols))
}

/// Assigns every row of `ds` to a chunk.
pub fn chunk(ds: &Dataset, method: &ChunkMethod) -> Result<Chunking, DataError> {
    let x = spatial(ds, method.features())?;
    if x.nrows() == 0 {
        return Err(DataError::EmptyDataset);
    }
    match method {
        ChunkMethod::Grid { tile_size, .. } => {
            let tiles: Vec<f64> = match tile_size.len() {
                1 => vec![tile_size[0]; x.ncols()],
                l if l == x.ncols() => tile_size.clone(),
                l => {
                    return Err(DataError::InvalidChunking(format!(
                        "{l} tile sizes for {} spatial features",
                        x.ncols()
                    )))
                }
            };
            if tiles.iter().any(|t| !(*t > 0.0) || !t.is_finite()) {
                return Err(DataError::InvalidChunking("tile sizes must be positive".into()));
            }
            let keys: Vec<Vec<i64>> = (0..x.nrows())
                .map(|i| tiles.iter().enumerate().map(|(d, t)| (x[(i, d)] / t).floor() as i64).collect())
                .collect();
            let mut ids: BTreeMap<&Vec<i64>, usize> = keys.iter().map(|k| (k, 0)).collect();
            for (i, v) in ids.values_mut().enumerate() {
                *v = i;
            }
            Ok(Chunking {
                method: method.clone(),
                assignment: keys.iter().map(|k| ids[k]).collect(),
                n_chunks: ids.len(),
                inertia: None,
                centroids: None,
            })
        }
        ChunkMethod::KMeans { k, max_iter, seed, .. } => {
            let r = kmeans(&x, *k, *max_iter, *seed)?;
            Ok(Chunking {
                method: method.clone(),
                n_chunks: r.centroids.nrows(),
                assignment: r.assignment,
                inertia: Some(r.inertia),
                centroids: Some(r.centroids),
            })
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use nalgebra::DVector;
    use proptest::prelude::*;
    use rand::Rng;
    use rand_distr::StandardNormal;

    fn points(x: DMatrix<f64>) -> Dataset {
        let n = x.nrows();
        let names = (0..x.ncols()).map(|d| format!("f{d}")).collect();
        Dataset { features: x, feature_names: names, target: DVector::zeros(n), track_id: None, row_ids: (0..n as u64).collect() }
    }

    fn xy() -> Vec<String> {
        vec!["f0".into(), "f1".into()]
    }

    #[test]
    fn k_equals_n_gives_singletons() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let x = DMatrix::from_fn(25, 2, |_, _| rng.random_range(0.0..10.0));
        let r = kmeans(&x, 25, 100, 0).unwrap();
        assert_eq!(r.inertia, 0.0);
        let mut a = r.assignment.clone();
        a.sort_unstable();
        a.dedup();
        assert_eq!(a.len(), 25);
    }

    #[test]
    fn k_too_large() {
        let x = DMatrix::zeros(3, 2);
        assert_eq!(kmeans(&x, 4, 10, 0), Err(DataError::KTooLarge { k: 4, n: 3 }));
    }

    fn same_partition(a: &[usize], b: &[usize]) -> bool {
        (0..a.len()).all(|i| (0..a.len()).all(|j| (a[i] == a[j]) == (b[i] == b[j])))
    }

    fn sse(x: &DMatrix<f64>, labels: &[usize]) -> f64 {
        let mut total = 0.0;
        for c in 0..2 {
            let rows: Vec<usize> = (0..x.nrows()).filter(|&i| labels[i] == c).collect();
            if rows.is_empty() {
                continue;
            }
            let m = x.select_rows(&rows).row_mean();
            total += rows.iter().map(|&i| (x.row(i) - &m).norm_squared()).sum::<f64>();
        }
        total
    }

    #[test]
    fn two_blobs_match_brute_force_partition() {
        for seed in 0..5 {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let n = 14;
            let x = DMatrix::from_fn(n, 2, |i, _| {
                let centre = if i < n / 2 { 0.0 } else { 10.0 / 2f64.sqrt() };
                centre + rng.sample::<f64, _>(StandardNormal)
            });
            let mut best = (f64::INFINITY, vec![]);
            for mask in 1u32..(1 << (n - 1)) {
                let labels: Vec<usize> = (0..n).map(|i| ((mask >> i) & 1) as usize).collect();
                let s = sse(&x, &labels);
                if s < best.0 {
                    best = (s, labels);
                }
            }
            let r = kmeans(&x, 2, 100, seed).unwrap();
            assert!(same_partition(&r.assignment, &best.1), "seed {seed}");
            assert!((r.inertia - best.0).abs() < 1e-9 * best.0);
        }
    }

    #[test]
    fn grid_tile_thirty() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let x = DMatrix::from_fn(500, 2, |_, _| rng.random_range(0.0..90.0));
        let c = chunk(&points(x), &ChunkMethod::Grid { features: xy(), tile_size: vec![30.0] }).unwrap();
        assert_eq!(c.n_chunks, 9);
        assert!(c.sizes().iter().all(|&s| s > 0));
    }

    #[test]
    fn grid_on_one_axis_and_errors() {
        let x = DMatrix::from_fn(9, 2, |i, _| i as f64 * 10.0);
        let ds = points(x);
        let c = chunk(&ds, &ChunkMethod::Grid { features: vec!["f0".into()], tile_size: vec![30.0] }).unwrap();
        assert_eq!(c.assignment, vec![0, 0, 0, 1, 1, 1, 2, 2, 2]);
        let e = chunk(&ds, &ChunkMethod::Grid { features: vec![], tile_size: vec![30.0] });
        assert_eq!(e, Err(DataError::NoSpatialFeatures));
        let e = chunk(&ds, &ChunkMethod::Grid { features: xy(), tile_size: vec![1.0, 2.0, 3.0] });
        assert!(matches!(e, Err(DataError::InvalidChunking(_))));
    }

    #[test]
    fn kmeans_chunking_has_no_empty_chunks() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let x = DMatrix::from_fn(300, 2, |_, _| rng.random_range(0.0..100.0));
        let m = ChunkMethod::KMeans { features: xy(), k: 12, max_iter: 100, seed: 1 };
        let c = chunk(&points(x), &m).unwrap();
        assert!(c.sizes().iter().all(|&s| s > 0));
        assert_eq!(c.sizes().iter().sum::<usize>(), 300);
        assert_eq!(c.centroids.unwrap().nrows(), c.n_chunks);
    }

    #[test]
    fn duplicate_points_still_seed_k_centres() {
        let x = DMatrix::from_row_slice(4, 1, &[1.0, 1.0, 1.0, 5.0]);
        let r = kmeans(&x, 3, 10, 0).unwrap();
        assert_eq!(r.inertia, 0.0);
        assert!(r.centroids.nrows() <= 3);
    }

    proptest! {
        #[test]
        fn inertia_never_increases(seed in 0u64..500, k in 1usize..8) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let x = DMatrix::from_fn(60, 2, |_, _| rng.random_range(-5.0..5.0));
            let r = kmeans(&x, k, 100, seed).unwrap();
            for w in r.history.windows(2) {
                prop_assert!(w[1] <= w[0] * (1.0 + 1e-12));
            }
        }

        #[test]
        fn grid_is_translation_consistent(seed in 0u64..500, sx in -5i32..5, sy in -5i32..5) {
            let tile = 7.5;
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let x = DMatrix::from_fn(80, 2, |_, _| rng.random_range(0.0..60.0));
            let shifted = DMatrix::from_fn(80, 2, |i, d| x[(i, d)] + tile * if d == 0 { sx } else { sy } as f64);
            let m = ChunkMethod::Grid { features: xy(), tile_size: vec![tile] };
            let a = chunk(&points(x), &m).unwrap();
            let b = chunk(&points(shifted), &m).unwrap();
            prop_assert_eq!(a.n_chunks, b.n_chunks);
            prop_assert!(same_partition(&a.assignment, &b.assignment));
        }
    }
}

use std::collections::{BTreeSet, HashMap};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{DataError, Dataset};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SplitUnit {
    ByTrack,
    ByRow,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SplitSpec {
    /// Train, validation and test fractions.
    pub fractions: [f64; 3],
    pub unit: SplitUnit,
    pub seed: u64,
}

impl Default for SplitSpec {
    fn default() -> Self {
        SplitSpec { fractions: [0.7, 0.1, 0.2], unit: SplitUnit::ByTrack, seed: 0 }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Splits {
    pub train: Dataset,
    pub val: Dataset,
    pub test: Dataset,
}

/// Integer allocation of `total` units by largest remainder. Ties in the
/// remainder go to the earlier split, and every split receives at least one
/// unit when `total ≥ 3`.
fn allocate(total: usize, fractions: &[f64; 3]) -> [usize; 3] {
    let exact: Vec<f64> = fractions.iter().map(|f| f * total as f64).collect();
    let mut counts = [0usize; 3];
    for i in 0..3 {
        counts[i] = exact[i].floor() as usize;
    }
    let mut order = [0usize, 1, 2];
    order.sort_by(|&a, &b| (exact[b] - exact[b].floor()).total_cmp(&(exact[a] - exact[a].floor())).then(a.cmp(&b)));
    let mut left = total - counts.iter().sum::<usize>();
    for &i in order.iter().cycle() {
        if left == 0 {
            break;
        }
        counts[i] += 1;
        left -= 1;
    }
    while let Some(empty) = counts.iter().position(|&c| c == 0) {
        let donor = (0..3).max_by(|&a, &b| counts[a].cmp(&counts[b]).then(b.cmp(&a))).unwrap();
        counts[donor] -= 1;
        counts[empty] += 1;
    }
    counts
}

/// Partitions `ds` into train/validation/test. Whole tracks (or rows) are
/// shuffled with the seed and dealt out by the fractions; rows keep their
/// original order inside each split.
pub fn split(ds: &Dataset, spec: &SplitSpec) -> Result<Splits, DataError> {
    let f = spec.fractions;
    if f.iter().any(|v| !(*v > 0.0)) || (f.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
        return Err(DataError::InvalidFractions(f));
    }
    let unit_of: Vec<i64> = match spec.unit {
        SplitUnit::ByTrack => ds.track_id.clone().ok_or(DataError::MissingTrackIds)?,
        SplitUnit::ByRow => (0..ds.len() as i64).collect(),
    };
    let mut units: Vec<i64> = unit_of.iter().copied().collect::<BTreeSet<_>>().into_iter().collect();
    if units.len() < 3 {
        return Err(DataError::TooFewTracks(units.len()));
    }
    units.shuffle(&mut ChaCha8Rng::seed_from_u64(spec.seed));
    let counts = allocate(units.len(), &f);
    let mut part: HashMap<i64, usize> = HashMap::with_capacity(units.len());
    for (pos, u) in units.iter().enumerate() {
        let which = if pos < counts[0] {
            0
        } else if pos < counts[0] + counts[1] {
            1
        } else {
            2
        };
        part.insert(*u, which);
    }
    let mut idx: [Vec<usize>; 3] = Default::default();
    for (row, u) in unit_of.iter().enumerate() {
        idx[part[u]].push(row);
    }
    Ok(Splits { train: ds.subset(&idx[0]), val: ds.subset(&idx[1]), test: ds.subset(&idx[2]) })
}

#[cfg(test)]
mod tests {
    use super::*;
    use nalgebra::{DMatrix, DVector};
    use proptest::prelude::*;

    fn tracked(tracks: &[i64]) -> Dataset {
        let n = tracks.len();
        Dataset {
            features: DMatrix::from_fn(n, 1, |i, _| i as f64),
            feature_names: vec!["x".into()],
            target: DVector::zeros(n),
            track_id: Some(tracks.to_vec()),
            row_ids: (0..n as u64).collect(),
        }
    }

    fn track_set(d: &Dataset) -> BTreeSet<i64> {
        d.track_id.as_ref().unwrap().iter().copied().collect()
    }

    #[test]
    fn ten_tracks_split_seven_one_two() {
        let tracks: Vec<i64> = (0..10).flat_map(|t| std::iter::repeat(t).take(5)).collect();
        let s = split(&tracked(&tracks), &SplitSpec::default()).unwrap();
        assert_eq!(track_set(&s.train).len(), 7);
        assert_eq!(track_set(&s.val).len(), 1);
        assert_eq!(track_set(&s.test).len(), 2);
        assert_eq!(s.train.len(), 35);
    }

    #[test]
    fn seeded_and_deterministic() {
        let tracks: Vec<i64> = (0..40).map(|i| i % 13).collect();
        let d = tracked(&tracks);
        let spec = SplitSpec { seed: 9, ..Default::default() };
        assert_eq!(split(&d, &spec).unwrap(), split(&d, &spec).unwrap());
        let other = split(&d, &SplitSpec { seed: 10, ..Default::default() }).unwrap();
        assert_ne!(split(&d, &spec).unwrap().train.row_ids, other.train.row_ids);
    }

    #[test]
    fn errors() {
        let mut d = tracked(&[1, 1, 2, 2]);
        assert_eq!(split(&d, &SplitSpec::default()), Err(DataError::TooFewTracks(2)));
        d.track_id = None;
        assert_eq!(split(&d, &SplitSpec::default()), Err(DataError::MissingTrackIds));
        let bad = SplitSpec { fractions: [0.5, 0.5, 0.1], ..Default::default() };
        assert!(matches!(split(&tracked(&[1, 2, 3]), &bad), Err(DataError::InvalidFractions(_))));
    }

    #[test]
    fn by_row_ignores_tracks() {
        let mut d = tracked(&[0; 20]);
        d.track_id = None;
        let s = split(&d, &SplitSpec { unit: SplitUnit::ByRow, ..Default::default() }).unwrap();
        assert_eq!((s.train.len(), s.val.len(), s.test.len()), (14, 2, 4));
    }

    #[test]
    fn allocation_matches_brute_force_rounding() {
        // largest remainder: counts minimise the max deviation from exact shares
        for total in 3..60 {
            let c = allocate(total, &[0.7, 0.1, 0.2]);
            assert_eq!(c.iter().sum::<usize>(), total);
            assert!(c.iter().all(|&v| v >= 1));
            if total >= 10 {
                for (i, f) in [0.7, 0.1, 0.2].iter().enumerate() {
                    assert!((c[i] as f64 - f * total as f64).abs() < 1.0);
                }
            }
        }
    }

    proptest! {
        #[test]
        fn partition_is_disjoint_exhaustive_and_track_atomic(
            tracks in prop::collection::vec(0i64..12, 3..120),
            seed in 0u64..1000,
        ) {
            let d = tracked(&tracks);
            match split(&d, &SplitSpec { seed, ..Default::default() }) {
                Err(DataError::TooFewTracks(k)) => prop_assert!(k < 3),
                Err(e) => panic!("{e}"),
                Ok(s) => {
                    let mut all: Vec<u64> = [&s.train, &s.val, &s.test].iter().flat_map(|p| p.row_ids.clone()).collect();
                    all.sort_unstable();
                    prop_assert_eq!(all, d.row_ids.clone());
                    let (a, b, c) = (track_set(&s.train), track_set(&s.val), track_set(&s.test));
                    prop_assert!(a.is_disjoint(&b) && a.is_disjoint(&c) && b.is_disjoint(&c));
                    for p in [&s.train, &s.val, &s.test] {
                        prop_assert!(p.row_ids.windows(2).all(|w| w[0] < w[1]));
                    }
                }
            }
        }
    }
}

use std::collections::HashMap;
use std::fs::File;
use std::io::BufWriter;
use std::path::Path;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use super::{DataError, Dataset};

/// Which CSV columns to read.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CsvSchema {
    pub features: Vec<String>,
    pub target: String,
    #[serde(default)]
    pub track: Option<String>,
    /// Row identifier column; defaults to `row_id` when present, else the
    /// zero-based data-row index.
    #[serde(default)]
    pub row_id: Option<String>,
}

/// A loaded dataset and the number of data rows dropped for missing or
/// non-finite values.
#[derive(Clone, Debug, PartialEq)]
pub struct Loaded {
    pub dataset: Dataset,
    pub dropped: usize,
}

/// Unlabelled inputs for prediction.
#[derive(Clone, Debug, PartialEq)]
pub struct InputTable {
    pub features: DMatrix<f64>,
    pub feature_names: Vec<String>,
    pub row_ids: Vec<u64>,
    pub dropped: usize,
}

/// One line of the predictions file.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PredictionRow {
    pub row_id: u64,
    pub prediction: f64,
    pub latent_std: f64,
    pub obs_std: f64,
    pub lower95: f64,
    pub upper95: f64,
}

fn io_err(path: &Path, e: impl std::fmt::Display) -> DataError {
    DataError::Io { path: path.display().to_string(), message: e.to_string() }
}

fn open(path: &Path) -> Result<(csv::Reader<File>, HashMap<String, usize>), DataError> {
    let mut rdr = csv::ReaderBuilder::new()
        .has_headers(true)
        .trim(csv::Trim::All)
        .from_path(path)
        .map_err(|e| io_err(path, e))?;
    let headers = rdr.headers().map_err(|e| io_err(path, e))?.clone();
    let mut index = HashMap::new();
    for (i, h) in headers.iter().enumerate() {
        if index.insert(h.to_string(), i).is_some() {
            return Err(DataError::DuplicateFeature(h.to_string()));
        }
    }
    Ok((rdr, index))
}

fn column(index: &HashMap<String, usize>, name: &str) -> Result<usize, DataError> {
    index.get(name).copied().ok_or_else(|| DataError::MissingColumn(name.to_string()))
}

fn finite(field: &str) -> Option<f64> {
    field.parse::<f64>().ok().filter(|v| v.is_finite())
}

fn parse_int<T: std::str::FromStr>(field: &str, row: usize, column: &str) -> Result<T, DataError> {
    field.parse::<T>().map_err(|_| DataError::ParseError {
        row,
        column: column.to_string(),
        message: format!("expected an integer, got '{field}'"),
    })
}

fn row_id_column(index: &HashMap<String, usize>, configured: &Option<String>) -> Result<Option<(usize, String)>, DataError> {
    match configured {
        Some(name) => Ok(Some((column(index, name)?, name.clone()))),
        None => Ok(index.get("row_id").map(|&i| (i, "row_id".to_string()))),
    }
}

/// Reads the configured columns. Rows whose feature or target fields are
/// empty, unparseable or non-finite are dropped and counted; malformed
/// records and bad id fields are errors.
pub fn load_csv(path: impl AsRef<Path>, schema: &CsvSchema) -> Result<Loaded, DataError> {
    let path = path.as_ref();
    let (mut rdr, index) = open(path)?;
    for (i, f) in schema.features.iter().enumerate() {
        if schema.features[..i].contains(f) {
            return Err(DataError::DuplicateFeature(f.clone()));
        }
    }
    let feat_cols = schema.features.iter().map(|f| column(&index, f)).collect::<Result<Vec<_>, _>>()?;
    let target_col = column(&index, &schema.target)?;
    let track_col = schema.track.as_ref().map(|t| column(&index, t).map(|c| (c, t.clone()))).transpose()?;
    let id_col = row_id_column(&index, &schema.row_id)?;

    let d = feat_cols.len();
    let mut values = Vec::new();
    let mut target = Vec::new();
    let mut tracks = Vec::new();
    let mut ids = Vec::new();
    let mut dropped = 0;
    for (row, rec) in rdr.records().enumerate() {
        let rec = rec.map_err(|e| DataError::ParseError { row, column: String::new(), message: e.to_string() })?;
        let field = |c: usize| rec.get(c).unwrap_or("");
        let feats: Option<Vec<f64>> = feat_cols.iter().map(|&c| finite(field(c))).collect();
        let (Some(feats), Some(y)) = (feats, finite(field(target_col))) else {
            dropped += 1;
            continue;
        };
        if let Some((c, name)) = &track_col {
            tracks.push(parse_int::<i64>(field(*c), row, name)?);
        }
        ids.push(match &id_col {
            Some((c, name)) => parse_int::<u64>(field(*c), row, name)?,
            None => row as u64,
        });
        values.extend(feats);
        target.push(y);
    }
    if target.is_empty() {
        return Err(DataError::EmptyDataset);
    }
    let n = target.len();
    Ok(Loaded {
        dataset: Dataset {
            features: DMatrix::from_row_slice(n, d, &values),
            feature_names: schema.features.clone(),
            target: DVector::from_vec(target),
            track_id: track_col.map(|_| tracks),
            row_ids: ids,
        },
        dropped,
    })
}

/// Reads feature columns only, for prediction. Rows with missing or
/// non-finite features are dropped and counted.
pub fn load_inputs(path: impl AsRef<Path>, features: &[String], row_id: &Option<String>) -> Result<InputTable, DataError> {
    let path = path.as_ref();
    let (mut rdr, index) = open(path)?;
    let feat_cols = features.iter().map(|f| column(&index, f)).collect::<Result<Vec<_>, _>>()?;
    let id_col = row_id_column(&index, row_id)?;
    let mut values = Vec::new();
    let mut ids = Vec::new();
    let mut dropped = 0;
    for (row, rec) in rdr.records().enumerate() {
        let rec = rec.map_err(|e| DataError::ParseError { row, column: String::new(), message: e.to_string() })?;
        let field = |c: usize| rec.get(c).unwrap_or("");
        let Some(feats) = feat_cols.iter().map(|&c| finite(field(c))).collect::<Option<Vec<f64>>>() else {
            dropped += 1;
            continue;
        };
        ids.push(match &id_col {
            Some((c, name)) => parse_int::<u64>(field(*c), row, name)?,
            None => row as u64,
        });
        values.extend(feats);
    }
    if ids.is_empty() {
        return Err(DataError::EmptyDataset);
    }
    Ok(InputTable {
        features: DMatrix::from_row_slice(ids.len(), features.len(), &values),
        feature_names: features.to_vec(),
        row_ids: ids,
        dropped,
    })
}

fn fmt(v: f64) -> String {
    format!("{v}")
}

/// Writes `row_id[,track_id],features...,target_name`.
pub fn save_dataset(path: impl AsRef<Path>, ds: &Dataset, target_name: &str) -> Result<(), DataError> {
    let path = path.as_ref();
    let mut w = csv::Writer::from_writer(BufWriter::new(File::create(path).map_err(|e| io_err(path, e))?));
    let mut header = vec!["row_id".to_string()];
    if ds.track_id.is_some() {
        header.push("track_id".into());
    }
    header.extend(ds.feature_names.iter().cloned());
    header.push(target_name.to_string());
    w.write_record(&header).map_err(|e| io_err(path, e))?;
    for i in 0..ds.len() {
        let mut rec = vec![ds.row_ids[i].to_string()];
        if let Some(t) = &ds.track_id {
            rec.push(t[i].to_string());
        }
        rec.extend(ds.features.row(i).iter().map(|&v| fmt(v)));
        rec.push(fmt(ds.target[i]));
        w.write_record(&rec).map_err(|e| io_err(path, e))?;
    }
    w.flush().map_err(|e| io_err(path, e))
}

/// Writes the predictions file: `row_id,prediction,latent_std,obs_std,lower95,upper95`.
pub fn save_predictions(path: impl AsRef<Path>, rows: &[PredictionRow]) -> Result<(), DataError> {
    let path = path.as_ref();
    let mut w = csv::Writer::from_writer(BufWriter::new(File::create(path).map_err(|e| io_err(path, e))?));
    w.write_record(["row_id", "prediction", "latent_std", "obs_std", "lower95", "upper95"])
        .map_err(|e| io_err(path, e))?;
    for r in rows {
        w.write_record([
            r.row_id.to_string(),
            fmt(r.prediction),
            fmt(r.latent_std),
            fmt(r.obs_std),
            fmt(r.lower95),
            fmt(r.upper95),
        ])
        .map_err(|e| io_err(path, e))?;
    }
    w.flush().map_err(|e| io_err(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::io::Write;

    fn write(dir: &tempfile::TempDir, name: &str, text: &str) -> std::path::PathBuf {
        let p = dir.path().join(name);
        File::create(&p).unwrap().write_all(text.as_bytes()).unwrap();
        p
    }

    fn schema() -> CsvSchema {
        CsvSchema { features: vec!["x".into(), "z".into()], target: "y".into(), track: None, row_id: None }
    }

    #[test]
    fn unparseable_target_is_dropped_and_counted() {
        let dir = tempfile::tempdir().unwrap();
        let p = write(&dir, "a.csv", "x,z,y\n1,2,3\n4,5,oops\n7,8,9\n");
        let l = load_csv(&p, &schema()).unwrap();
        assert_eq!(l.dataset.len(), 2);
        assert_eq!(l.dropped, 1);
        assert_eq!(l.dataset.row_ids, vec![0, 2]);
        assert_eq!(l.dataset.features.row(1).iter().copied().collect::<Vec<_>>(), vec![7.0, 8.0]);
    }

    #[test]
    fn header_only_is_empty() {
        let dir = tempfile::tempdir().unwrap();
        let p = write(&dir, "b.csv", "x,z,y\n");
        assert_eq!(load_csv(&p, &schema()), Err(DataError::EmptyDataset));
    }

    #[test]
    fn missing_column_named() {
        let dir = tempfile::tempdir().unwrap();
        let p = write(&dir, "c.csv", "x,y\n1,2\n");
        assert_eq!(load_csv(&p, &schema()), Err(DataError::MissingColumn("z".into())));
    }

    #[test]
    fn bad_track_id_is_a_parse_error() {
        let dir = tempfile::tempdir().unwrap();
        let p = write(&dir, "d.csv", "x,z,y,t\n1,2,3,1\n1,2,3,a\n");
        let s = CsvSchema { track: Some("t".into()), ..schema() };
        assert!(matches!(load_csv(&p, &s), Err(DataError::ParseError { row: 1, .. })));
    }

    #[test]
    fn rows_read_plus_dropped_is_input_rows() {
        let dir = tempfile::tempdir().unwrap();
        let p = write(&dir, "e.csv", "x,z,y\n1,,3\nnan,5,6\n7,8,inf\n1,1,1\n");
        let l = load_csv(&p, &schema()).unwrap();
        assert_eq!(l.dataset.len() + l.dropped, 4);
    }

    #[test]
    fn predictions_round_trip_byte_stable() {
        let dir = tempfile::tempdir().unwrap();
        let rows = vec![
            PredictionRow { row_id: 3, prediction: -1.25, latent_std: 0.1, obs_std: 0.2, lower95: -1.6, upper95: -0.9 },
            PredictionRow { row_id: 9, prediction: 1.0 / 3.0, latent_std: 1e-9, obs_std: 0.5, lower95: 0.0, upper95: 2.0 },
        ];
        let a = dir.path().join("p1.csv");
        save_predictions(&a, &rows).unwrap();
        let s = CsvSchema {
            features: vec!["latent_std".into(), "obs_std".into(), "lower95".into(), "upper95".into()],
            target: "prediction".into(),
            track: None,
            row_id: None,
        };
        let l = load_csv(&a, &s).unwrap().dataset;
        let back: Vec<PredictionRow> = (0..l.len())
            .map(|i| PredictionRow {
                row_id: l.row_ids[i],
                prediction: l.target[i],
                latent_std: l.features[(i, 0)],
                obs_std: l.features[(i, 1)],
                lower95: l.features[(i, 2)],
                upper95: l.features[(i, 3)],
            })
            .collect();
        assert_eq!(back, rows);
        let b = dir.path().join("p2.csv");
        save_predictions(&b, &back).unwrap();
        assert_eq!(std::fs::read(&a).unwrap(), std::fs::read(&b).unwrap());
    }

    #[test]
    fn inputs_only_loader() {
        let dir = tempfile::tempdir().unwrap();
        let p = write(&dir, "f.csv", "row_id,x,z\n5,1,2\n6,,1\n7,3,4\n");
        let t = load_inputs(&p, &["z".into(), "x".into()], &None).unwrap();
        assert_eq!(t.row_ids, vec![5, 7]);
        assert_eq!(t.dropped, 1);
        assert_eq!(t.features[(1, 0)], 4.0);
    }
}

//! CSV ingestion, standardization, holdout splits and result files.

use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::gp::{Dataset, GpPosterior};

/// Width of the standardized input range.
pub const X_SPAN: f64 = 10.0;

#[derive(Debug, Error)]
pub enum IoError {
    #[error("{path}: {message}")]
    File { path: PathBuf, message: String },
    #[error("line {line}: {message}")]
    Row { line: u64, message: String },
    #[error("expected header `x,y` or `series_id,x,y`, found `{0}`")]
    Header(String),
    #[error("no data rows")]
    Empty,
    #[error("cannot standardize: {0} has zero spread")]
    ZeroSpread(&'static str),
    #[error("holdout fraction must lie in [0, 1), got {0}")]
    Holdout(f64),
    #[error("no samples to summarize")]
    NoSamples,
}

fn file_err(path: &Path, e: impl ToString) -> IoError {
    IoError::File {
        path: path.to_path_buf(),
        message: e.to_string(),
    }
}

/// Parsed CSV contents.
#[derive(Debug, Clone, PartialEq)]
pub enum Table {
    Single(Dataset),
    /// Series in order of first appearance, keyed by their id.
    Multi(Vec<(String, Dataset)>),
}

impl Table {
    pub fn into_single(self) -> Result<Dataset, IoError> {
        match self {
            Table::Single(d) => Ok(d),
            Table::Multi(_) => Err(IoError::Header("series_id,x,y (expected x,y)".into())),
        }
    }

    pub fn into_series(self) -> Vec<(String, Dataset)> {
        match self {
            Table::Single(d) => vec![("0".to_string(), d)],
            Table::Multi(s) => s,
        }
    }
}

/// Reads a CSV with header `x,y` or `series_id,x,y`.
pub fn ingest_csv(path: &Path) -> Result<Table, IoError> {
    let text = fs::read_to_string(path).map_err(|e| file_err(path, e))?;
    parse_csv(&text)
}

pub fn parse_csv(text: &str) -> Result<Table, IoError> {
    let mut reader = csv::ReaderBuilder::new()
        .trim(csv::Trim::All)
        .from_reader(text.as_bytes());
    let header: Vec<String> = reader
        .headers()
        .map_err(|e| IoError::Row {
            line: 1,
            message: e.to_string(),
        })?
        .iter()
        .map(str::to_string)
        .collect();
    let multi = match header.iter().map(String::as_str).collect::<Vec<_>>()[..] {
        ["x", "y"] => false,
        ["series_id", "x", "y"] => true,
        _ => return Err(IoError::Header(header.join(","))),
    };
    let mut order: Vec<String> = Vec::new();
    let mut series: BTreeMap<String, (Vec<f64>, Vec<f64>)> = BTreeMap::new();
    for record in reader.records() {
        let record = record.map_err(|e| IoError::Row {
            line: e.position().map_or(0, |p| p.line()),
            message: e.to_string(),
        })?;
        let line = record.position().map_or(0, |p| p.line());
        let number = |i: usize| -> Result<f64, IoError> {
            let field = record.get(i).unwrap_or_default();
            match field.parse::<f64>() {
                Ok(v) if v.is_finite() => Ok(v),
                _ => Err(IoError::Row {
                    line,
                    message: format!("`{field}` is not a finite number"),
                }),
            }
        };
        let (id, x, y) = if multi {
            (record[0].to_string(), number(1)?, number(2)?)
        } else {
            (String::new(), number(0)?, number(1)?)
        };
        let entry = series.entry(id.clone()).or_insert_with(|| {
            order.push(id);
            Default::default()
        });
        entry.0.push(x);
        entry.1.push(y);
    }
    if order.is_empty() {
        return Err(IoError::Empty);
    }
    let mut out: Vec<(String, Dataset)> = order
        .into_iter()
        .map(|id| {
            let (xs, ys) = series.remove(&id).expect("recorded id");
            (id, Dataset { xs, ys })
        })
        .collect();
    if multi {
        Ok(Table::Multi(out))
    } else {
        Ok(Table::Single(out.remove(0).1))
    }
}

/// Affine maps `x ↦ [0, 10]` and `y ↦ z-score`, kept for inversion.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Standardization {
    pub x_min: f64,
    pub x_max: f64,
    pub y_mean: f64,
    pub y_std: f64,
}

impl Standardization {
    pub fn fit(data: &Dataset) -> Result<Self, IoError> {
        if data.is_empty() {
            return Err(IoError::Empty);
        }
        let x_min = data.xs.iter().copied().fold(f64::INFINITY, f64::min);
        let x_max = data.xs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        if x_max <= x_min {
            return Err(IoError::ZeroSpread("x"));
        }
        let n = data.len() as f64;
        let y_mean = data.ys.iter().sum::<f64>() / n;
        let y_std = (data.ys.iter().map(|y| (y - y_mean).powi(2)).sum::<f64>() / n).sqrt();
        if y_std.is_nan() || y_std <= 0.0 {
            return Err(IoError::ZeroSpread("y"));
        }
        Ok(Standardization {
            x_min,
            x_max,
            y_mean,
            y_std,
        })
    }

    pub fn x(&self, x: f64) -> f64 {
        X_SPAN * ((x - self.x_min) / (self.x_max - self.x_min))
    }

    pub fn x_inverse(&self, x: f64) -> f64 {
        self.x_min + x * (self.x_max - self.x_min) / X_SPAN
    }

    pub fn y(&self, y: f64) -> f64 {
        (y - self.y_mean) / self.y_std
    }

    pub fn apply(&self, data: &Dataset) -> Dataset {
        Dataset {
            xs: data.xs.iter().map(|&x| self.x(x)).collect(),
            ys: data.ys.iter().map(|&y| self.y(y)).collect(),
        }
    }

    /// Maps a posterior over standardized outputs back to original units.
    pub fn invert(&self, post: &GpPosterior) -> GpPosterior {
        let s2 = self.y_std * self.y_std;
        GpPosterior {
            at: post.at.iter().map(|&x| self.x_inverse(x)).collect(),
            mean: post.mean.map(|m| m * self.y_std + self.y_mean),
            cov: &post.cov * s2,
            noise_var: post.noise_var * s2,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum HoldoutMode {
    /// The last fraction of points by x.
    ExtrapolateTail,
    /// The central fraction of points by x.
    InterpolateMiddle,
    /// A uniformly random subset.
    Random,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct HoldoutSpec {
    pub fraction: f64,
    pub mode: HoldoutMode,
}

impl Default for HoldoutSpec {
    fn default() -> Self {
        HoldoutSpec {
            fraction: 0.0,
            mode: HoldoutMode::ExtrapolateTail,
        }
    }
}

impl HoldoutSpec {
    pub fn validate(&self) -> Result<(), IoError> {
        if !(0.0..1.0).contains(&self.fraction) {
            return Err(IoError::Holdout(self.fraction));
        }
        Ok(())
    }

    /// Splits into `(train, test)`; both keep the original row order.
    pub fn split<R: Rng + ?Sized>(
        &self,
        data: &Dataset,
        rng: &mut R,
    ) -> Result<(Dataset, Dataset), IoError> {
        self.validate()?;
        let n = data.len();
        let count = (self.fraction * n as f64).round() as usize;
        let mut by_x: Vec<usize> = (0..n).collect();
        by_x.sort_by(|&a, &b| data.xs[a].total_cmp(&data.xs[b]));
        let held: Vec<usize> = match self.mode {
            HoldoutMode::ExtrapolateTail => by_x[n - count..].to_vec(),
            HoldoutMode::InterpolateMiddle => {
                let start = (n - count) / 2;
                by_x[start..start + count].to_vec()
            }
            HoldoutMode::Random => {
                let mut idx: Vec<usize> = (0..n).collect();
                idx.shuffle(rng);
                idx.truncate(count);
                idx
            }
        };
        let mut is_held = vec![false; n];
        for i in held {
            is_held[i] = true;
        }
        let train: Vec<usize> = (0..n).filter(|&i| !is_held[i]).collect();
        let test: Vec<usize> = (0..n).filter(|&i| is_held[i]).collect();
        Ok((data.select(&train), data.select(&test)))
    }
}

/// Formats a number with 17 significant digits.
pub fn fmt17(v: f64) -> String {
    format!("{v:.16e}")
}

/// One predictions table: probe inputs with mean and both bands.
#[derive(Debug, Clone, PartialEq)]
pub struct PredictionTable {
    pub x: Vec<f64>,
    pub mean: Vec<f64>,
    pub std_noiseless: Vec<f64>,
    pub std_noisy: Vec<f64>,
    /// Observed outputs at the probe inputs, when known.
    pub observed: Option<Vec<f64>>,
    /// Optional draws, one vector per column.
    pub samples: Vec<Vec<f64>>,
}

impl PredictionTable {
    pub fn from_posterior(post: &GpPosterior) -> Self {
        PredictionTable {
            x: post.at.clone(),
            mean: post.mean.iter().copied().collect(),
            std_noiseless: post.std_noiseless(),
            std_noisy: post.std_noisy(),
            observed: None,
            samples: Vec::new(),
        }
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("x,mean,std_noiseless,std_noisy");
        if self.observed.is_some() {
            out.push_str(",observed");
        }
        for k in 0..self.samples.len() {
            out.push_str(&format!(",sample_{}", k + 1));
        }
        out.push('\n');
        for i in 0..self.x.len() {
            let mut row = vec![
                fmt17(self.x[i]),
                fmt17(self.mean[i]),
                fmt17(self.std_noiseless[i]),
                fmt17(self.std_noisy[i]),
            ];
            row.extend(self.observed.iter().map(|o| fmt17(o[i])));
            row.extend(self.samples.iter().map(|s| fmt17(s[i])));
            out.push_str(&row.join(","));
            out.push('\n');
        }
        out
    }

    pub fn from_csv(text: &str) -> Result<Self, IoError> {
        let mut reader = csv::Reader::from_reader(text.as_bytes());
        let header = reader
            .headers()
            .map_err(|e| IoError::Row {
                line: 1,
                message: e.to_string(),
            })?
            .clone();
        let width = header.len();
        let has_observed = header.get(4) == Some("observed");
        if width < 4 {
            return Err(IoError::Header(
                "predictions need at least 4 columns".into(),
            ));
        }
        let mut cols: Vec<Vec<f64>> = vec![Vec::new(); width];
        for record in reader.records() {
            let record = record.map_err(|e| IoError::Row {
                line: e.position().map_or(0, |p| p.line()),
                message: e.to_string(),
            })?;
            let line = record.position().map_or(0, |p| p.line());
            for (c, field) in record.iter().enumerate() {
                cols[c].push(field.parse().map_err(|_| IoError::Row {
                    line,
                    message: format!("`{field}` is not a number"),
                })?);
            }
        }
        let mut cols = cols.into_iter();
        let mut next = || cols.next().expect("width checked");
        Ok(PredictionTable {
            x: next(),
            mean: next(),
            std_noiseless: next(),
            std_noisy: next(),
            observed: has_observed.then(&mut next),
            samples: cols.collect(),
        })
    }
}

/// Writes `contents` to `path` through a temporary file and a rename.
pub fn write_atomic(path: &Path, contents: &[u8]) -> Result<(), IoError> {
    let dir = path
        .parent()
        .filter(|p| !p.as_os_str().is_empty())
        .unwrap_or(Path::new("."));
    let name = path
        .file_name()
        .ok_or_else(|| file_err(path, "not a file path"))?
        .to_string_lossy();
    let tmp = dir.join(format!(".{name}.tmp"));
    let result = fs::File::create(&tmp)
        .and_then(|mut f| f.write_all(contents).and_then(|_| f.sync_all()))
        .and_then(|_| fs::rename(&tmp, path));
    if let Err(e) = result {
        let _ = fs::remove_file(&tmp);
        return Err(file_err(path, e));
    }
    Ok(())
}

/// Serializes JSON with two-space indentation and a trailing newline.
pub fn json_bytes<T: Serialize>(value: &T) -> Vec<u8> {
    let mut bytes = serde_json::to_vec_pretty(value).expect("serializable value");
    bytes.push(b'\n');
    bytes
}

/// A set of output files, rendered fully in memory before anything is
/// written so that a failure leaves no partial results behind.
#[derive(Debug, Default, Clone)]
pub struct OutputSet {
    files: Vec<(String, Vec<u8>)>,
}

impl OutputSet {
    pub fn add(&mut self, name: &str, contents: Vec<u8>) {
        self.files.push((name.to_string(), contents));
    }

    pub fn names(&self) -> Vec<&str> {
        self.files.iter().map(|(n, _)| n.as_str()).collect()
    }

    /// Writes every file into `dir`, creating it if needed.
    pub fn write(&self, dir: &Path) -> Result<Vec<PathBuf>, IoError> {
        fs::create_dir_all(dir).map_err(|e| file_err(dir, e))?;
        self.files
            .iter()
            .map(|(name, bytes)| {
                let path = dir.join(name);
                write_atomic(&path, bytes)?;
                Ok(path)
            })
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::inference::chain_rng;
    use nalgebra::{DMatrix, DVector};

    #[test]
    fn parses_single_series() {
        let t = parse_csv("x,y\n0,1\n1,2\n").unwrap();
        assert_eq!(
            t,
            Table::Single(Dataset::new(vec![0.0, 1.0], vec![1.0, 2.0]).unwrap())
        );
    }

    #[test]
    fn parses_multiple_series_in_order_of_appearance() {
        let t = parse_csv("series_id,x,y\nb,0,1\na,0,2\nb,1,3\n").unwrap();
        let Table::Multi(s) = t else { panic!() };
        assert_eq!(s[0].0, "b");
        assert_eq!(s[0].1.ys, vec![1.0, 3.0]);
        assert_eq!(s[1].0, "a");
    }

    #[test]
    fn malformed_row_reports_its_line() {
        let err = parse_csv("x,y\n0,1\n1,oops\n").unwrap_err();
        assert!(matches!(err, IoError::Row { line: 3, .. }), "{err}");
        let err = parse_csv("x,y\n0,1\n1\n").unwrap_err();
        assert!(matches!(err, IoError::Row { line: 3, .. }), "{err}");
        assert!(matches!(parse_csv("x,y\n").unwrap_err(), IoError::Empty));
        assert!(matches!(parse_csv("").unwrap_err(), IoError::Header(_)));
        assert!(matches!(
            parse_csv("a,b\n1,2\n").unwrap_err(),
            IoError::Header(_)
        ));
        assert!(matches!(
            parse_csv("x,y\n1,inf\n").unwrap_err(),
            IoError::Row { .. }
        ));
    }

    #[test]
    fn standardization_maps_endpoints_exactly() {
        let xs: Vec<f64> = (0..=132).map(|m| 1949.0 + m as f64 / 12.0).collect();
        let ys = (0..xs.len()).map(|i| (i * i) as f64).collect();
        let d = Dataset::new(xs, ys).unwrap();
        let s = Standardization::fit(&d).unwrap();
        let z = s.apply(&d);
        assert_eq!(z.xs[0], 0.0);
        assert_eq!(*z.xs.last().unwrap(), 10.0);
        let n = z.len() as f64;
        let mean = z.ys.iter().sum::<f64>() / n;
        let var = z.ys.iter().map(|y| (y - mean).powi(2)).sum::<f64>() / n;
        assert!(mean.abs() < 1e-12 && (var - 1.0).abs() < 1e-12);
    }

    #[test]
    fn constant_column_cannot_be_standardized() {
        let d = Dataset::new(vec![0.0, 1.0], vec![3.0, 3.0]).unwrap();
        let err = Standardization::fit(&d).unwrap_err();
        assert!(err.to_string().contains("y has zero spread"));
        let d = Dataset::new(vec![1.0, 1.0], vec![3.0, 4.0]).unwrap();
        assert!(matches!(
            Standardization::fit(&d),
            Err(IoError::ZeroSpread("x"))
        ));
    }

    #[test]
    fn inversion_undoes_the_transform() {
        let s = Standardization {
            x_min: 1949.0,
            x_max: 1960.0,
            y_mean: 280.0,
            y_std: 120.0,
        };
        let post = GpPosterior {
            at: vec![s.x(1955.0)],
            mean: DVector::from_vec(vec![s.y(300.0)]),
            cov: DMatrix::from_element(1, 1, 0.25),
            noise_var: 0.1,
        };
        let back = s.invert(&post);
        assert!((back.at[0] - 1955.0).abs() < 1e-9);
        assert!((back.mean[0] - 300.0).abs() < 1e-9);
        assert!((back.cov[(0, 0)] - 0.25 * 14400.0).abs() < 1e-6);
    }

    #[test]
    fn holdout_modes_pick_the_right_points() {
        let xs: Vec<f64> = (0..10).rev().map(f64::from).collect();
        let d = Dataset::new(xs.clone(), xs.clone()).unwrap();
        let mut rng = chain_rng(0, 0);
        let tail = HoldoutSpec {
            fraction: 0.2,
            mode: HoldoutMode::ExtrapolateTail,
        };
        let (train, test) = tail.split(&d, &mut rng).unwrap();
        assert_eq!(test.xs, vec![9.0, 8.0]);
        assert_eq!(train.len(), 8);
        let mid = HoldoutSpec {
            fraction: 0.2,
            mode: HoldoutMode::InterpolateMiddle,
        };
        let (_, test) = mid.split(&d, &mut rng).unwrap();
        assert_eq!(test.xs, vec![5.0, 4.0]);
        let random = HoldoutSpec {
            fraction: 0.3,
            mode: HoldoutMode::Random,
        };
        let (train, test) = random.split(&d, &mut rng).unwrap();
        assert_eq!((train.len(), test.len()), (7, 3));
        let none = HoldoutSpec::default();
        let (train, test) = none.split(&d, &mut rng).unwrap();
        assert_eq!((train.len(), test.len()), (10, 0));
        let bad = HoldoutSpec {
            fraction: 1.0,
            mode: HoldoutMode::Random,
        };
        assert!(bad.split(&d, &mut rng).is_err());
    }

    #[test]
    fn predictions_round_trip_through_csv() {
        let mut rng = chain_rng(1, 0);
        let col = |rng: &mut rand_chacha::ChaCha8Rng| -> Vec<f64> {
            (0..20).map(|_| rng.random::<f64>() * 1e3 - 5e2).collect()
        };
        let table = PredictionTable {
            x: col(&mut rng),
            mean: col(&mut rng),
            std_noiseless: col(&mut rng),
            std_noisy: col(&mut rng),
            observed: None,
            samples: vec![col(&mut rng), vec![1e-300; 20]],
        };
        let back = PredictionTable::from_csv(&table.to_csv()).unwrap();
        assert_eq!(back, table);
        let with_observed = PredictionTable {
            observed: Some(col(&mut rng)),
            ..table
        };
        let csv = with_observed.to_csv();
        assert!(csv.starts_with("x,mean,std_noiseless,std_noisy,observed,sample_1,"));
        assert_eq!(PredictionTable::from_csv(&csv).unwrap(), with_observed);
    }

    #[test]
    fn output_set_writes_atomically() {
        let dir = tempfile::tempdir().unwrap();
        let mut out = OutputSet::default();
        out.add("a.json", json_bytes(&serde_json::json!({"k": 1})));
        out.add("b.csv", b"x\n".to_vec());
        let paths = out.write(&dir.path().join("sub")).unwrap();
        assert_eq!(paths.len(), 2);
        assert_eq!(fs::read_to_string(&paths[1]).unwrap(), "x\n");
        let leftovers = fs::read_dir(dir.path().join("sub")).unwrap().count();
        assert_eq!(leftovers, 2);
        let blocked = dir.path().join("file");
        fs::write(&blocked, "").unwrap();
        assert!(out.write(&blocked.join("inner")).is_err());
    }
}

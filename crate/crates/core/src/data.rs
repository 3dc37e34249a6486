//! Datasets, CSV ingestion and the simulation designs.
//!
//! Generators draw from ChaCha8 seeded with `seed_from_u64`, so a dataset is a
//! pure function of its parameters and seed on every platform.

use std::fs;
use std::io::Write;
use std::path::Path;

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Per-column centering and scaling applied to covariates.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ColumnStats {
    pub mean: f64,
    pub sd: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub x: DMatrix<f64>,
    pub y: DVector<f64>,
    pub column_names: Option<Vec<String>>,
    pub standardization: Option<Vec<ColumnStats>>,
}

impl Dataset {
    pub fn new(x: DMatrix<f64>, y: DVector<f64>) -> Result<Self> {
        if x.nrows() == 0 {
            return Err(Error::invalid("dataset needs at least one row"));
        }
        if x.nrows() != y.len() {
            return Err(Error::DimensionMismatch {
                expected: x.nrows(),
                found: y.len(),
            });
        }
        if x.iter().chain(y.iter()).any(|v| !v.is_finite()) {
            return Err(Error::invalid("dataset contains non-finite values"));
        }
        Ok(Self {
            x,
            y,
            column_names: None,
            standardization: None,
        })
    }

    pub fn n(&self) -> usize {
        self.y.len()
    }

    pub fn p(&self) -> usize {
        self.x.ncols()
    }

    /// Rows `idx` as a new dataset; standardization and names carry over.
    pub fn subset(&self, idx: &[usize]) -> Dataset {
        Dataset {
            x: self.x.select_rows(idx.iter()),
            y: DVector::from_fn(idx.len(), |i, _| self.y[idx[i]]),
            column_names: self.column_names.clone(),
            standardization: self.standardization.clone(),
        }
    }

    /// Centers and scales each covariate in place, recording the statistics.
    /// Constant columns keep unit scale. No-op if already standardized.
    pub fn standardize(&mut self) {
        if self.standardization.is_some() {
            return;
        }
        let stats = column_stats(&self.x);
        apply_stats(&mut self.x, &stats);
        self.standardization = Some(stats);
    }
}

pub fn column_stats(x: &DMatrix<f64>) -> Vec<ColumnStats> {
    let n = x.nrows() as f64;
    x.column_iter()
        .map(|c| {
            let mean = c.sum() / n;
            let var = if x.nrows() > 1 {
                c.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0)
            } else {
                0.0
            };
            let sd = var.sqrt();
            ColumnStats {
                mean,
                sd: if sd > 0.0 { sd } else { 1.0 },
            }
        })
        .collect()
}

/// Applies recorded statistics to new covariate rows.
pub fn apply_stats(x: &mut DMatrix<f64>, stats: &[ColumnStats]) {
    for (j, s) in stats.iter().enumerate() {
        for v in x.column_mut(j).iter_mut() {
            *v = (*v - s.mean) / s.sd;
        }
    }
}

/// Which column of a CSV file holds the response.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum ResponseColumn {
    Name(String),
    /// Zero-based.
    Index(usize),
    Last,
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct CsvOptions {
    /// `None` detects a header: the first row is a header when none of its
    /// fields parses as a number.
    pub has_header: Option<bool>,
}

/// Reads a comma-separated numeric table.
pub fn load_csv(path: &Path, response: &ResponseColumn, options: &CsvOptions) -> Result<Dataset> {
    let text = fs::read_to_string(path)?;
    parse_csv(&text, response, options)
}

struct Table {
    names: Option<Vec<String>>,
    rows: Vec<Vec<f64>>,
    width: usize,
}

fn read_table(text: &str, options: &CsvOptions) -> Result<Table> {
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(false)
        .trim(csv::Trim::All)
        .from_reader(text.as_bytes());
    let mut records = reader.records();
    let first = match records.next() {
        Some(r) => r?,
        None => return Err(Error::invalid("CSV input is empty")),
    };
    let header = options
        .has_header
        .unwrap_or_else(|| first.iter().all(|f| f.parse::<f64>().is_err()));
    let width = first.len();
    let names: Option<Vec<String>> = header.then(|| first.iter().map(str::to_string).collect());
    let column_label = |j: usize| match &names {
        Some(n) => n[j].clone(),
        None => format!("column {}", j + 1),
    };
    let mut rows: Vec<Vec<f64>> = Vec::new();
    let data_rows = std::iter::once(Ok(first)).filter(|_| !header).chain(records);
    for (offset, rec) in data_rows.enumerate() {
        let rec = rec?;
        let line = offset + 1 + usize::from(header);
        if rec.len() != width {
            return Err(Error::Parse {
                row: line,
                column: String::new(),
                message: format!("expected {width} fields, found {}", rec.len()),
            });
        }
        let mut row = Vec::with_capacity(width);
        for (j, field) in rec.iter().enumerate() {
            let v: f64 = field.parse().map_err(|_| Error::Parse {
                row: line,
                column: column_label(j),
                message: format!("non-numeric value '{field}'"),
            })?;
            if !v.is_finite() {
                return Err(Error::Parse {
                    row: line,
                    column: column_label(j),
                    message: format!("non-finite value '{field}'"),
                });
            }
            row.push(v);
        }
        rows.push(row);
    }
    if rows.is_empty() {
        return Err(Error::invalid("CSV input has no data rows"));
    }
    Ok(Table { names, rows, width })
}

pub fn parse_csv(text: &str, response: &ResponseColumn, options: &CsvOptions) -> Result<Dataset> {
    let Table { names, rows, width } = read_table(text, options)?;
    let col = match response {
        ResponseColumn::Last => width.checked_sub(1).ok_or_else(|| Error::invalid("no columns"))?,
        ResponseColumn::Index(i) if *i < width => *i,
        ResponseColumn::Index(i) => {
            return Err(Error::invalid(format!(
                "response column {i} out of range for {width} columns"
            )))
        }
        ResponseColumn::Name(name) => names
            .as_ref()
            .ok_or_else(|| Error::invalid("response given by name but the file has no header"))?
            .iter()
            .position(|c| c == name)
            .ok_or_else(|| Error::invalid(format!("no column named '{name}'")))?,
    };
    let n = rows.len();
    let p = width - 1;
    let x = DMatrix::from_fn(n, p, |i, j| rows[i][if j < col { j } else { j + 1 }]);
    let y = DVector::from_fn(n, |i, _| rows[i][col]);
    let mut ds = Dataset::new(x, y)?;
    ds.column_names = names;
    Ok(ds)
}

/// Reads a table in which every column is a covariate.
pub fn load_covariates_csv(path: &Path, options: &CsvOptions) -> Result<DMatrix<f64>> {
    let text = fs::read_to_string(path)?;
    parse_covariates_csv(&text, options)
}

pub fn parse_covariates_csv(text: &str, options: &CsvOptions) -> Result<DMatrix<f64>> {
    let Table { rows, width, .. } = read_table(text, options)?;
    Ok(DMatrix::from_fn(rows.len(), width, |i, j| rows[i][j]))
}

/// Writes `bytes` to `path` through a temporary file in the same directory.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let dir = path
        .parent()
        .filter(|p| !p.as_os_str().is_empty())
        .unwrap_or(Path::new("."));
    let mut tmp = tempfile::NamedTempFile::new_in(dir)?;
    tmp.write_all(bytes)?;
    tmp.persist(path).map_err(|e| Error::Io(e.error))?;
    Ok(())
}

fn float(v: f64) -> String {
    format!("{v:?}")
}

/// Serializes covariates and response as CSV with header `x1,…,xp,y`.
pub fn dataset_to_csv(ds: &Dataset) -> Result<String> {
    let mut w = csv::Writer::from_writer(Vec::new());
    let header: Vec<String> = (1..=ds.p())
        .map(|j| format!("x{j}"))
        .chain(["y".to_string()])
        .collect();
    w.write_record(&header)?;
    for i in 0..ds.n() {
        let row: Vec<String> = (0..ds.p())
            .map(|j| float(ds.x[(i, j)]))
            .chain([float(ds.y[i])])
            .collect();
        w.write_record(&row)?;
    }
    let bytes = w.into_inner().map_err(|e| Error::Io(e.into_error()))?;
    Ok(String::from_utf8(bytes).expect("CSV output is ASCII"))
}

/// Prediction table with header `index,prediction`, or
/// `index,prediction,tau` with one block of rows per level when `taus` is
/// given. `index` is the row of the input covariates.
pub fn predictions_to_csv(levels: &[DVector<f64>], taus: Option<&[f64]>) -> Result<String> {
    let mut w = csv::Writer::from_writer(Vec::new());
    match taus {
        Some(t) => {
            if t.len() != levels.len() {
                return Err(Error::DimensionMismatch {
                    expected: levels.len(),
                    found: t.len(),
                });
            }
            w.write_record(["index", "prediction", "tau"])?;
            for (pred, tau) in levels.iter().zip(t) {
                for (i, p) in pred.iter().enumerate() {
                    w.write_record([i.to_string(), float(*p), float(*tau)])?;
                }
            }
        }
        None => {
            if levels.len() != 1 {
                return Err(Error::invalid("several levels need a tau column"));
            }
            w.write_record(["index", "prediction"])?;
            for (i, p) in levels[0].iter().enumerate() {
                w.write_record([i.to_string(), float(*p)])?;
            }
        }
    }
    let bytes = w.into_inner().map_err(|e| Error::Io(e.into_error()))?;
    Ok(String::from_utf8(bytes).expect("CSV output is ASCII"))
}

/// `β_j = (−1)^j exp(−(j−1)/10)` for `j = 1..=p`.
pub fn friedman_beta(p: usize) -> DVector<f64> {
    DVector::from_fn(p, |i, _| {
        let j = (i + 1) as f64;
        let sign = if (i + 1) % 2 == 0 { 1.0 } else { -1.0 };
        sign * (-(j - 1.0) / 10.0).exp()
    })
}

/// Noise scale `c` with `Var(Xβ)/c² = snr` under equicorrelation `rho`.
pub fn friedman_noise_scale(beta: &DVector<f64>, rho: f64, snr: f64) -> f64 {
    let var = (1.0 - rho) * beta.norm_squared() + rho * beta.sum().powi(2);
    (var / snr).sqrt()
}

/// Linear model with equicorrelated Gaussian covariates, built from one shared
/// factor: `X_j = √ρ·W + √(1−ρ)·E_j`.
pub fn simulate_friedman(n: usize, p: usize, rho: f64, snr: f64, seed: u64) -> Result<Dataset> {
    if n < 2 || p < 1 {
        return Err(Error::invalid("need n >= 2 and p >= 1"));
    }
    if !(0.0..1.0).contains(&rho) {
        return Err(Error::invalid(format!("rho must lie in [0, 1), got {rho}")));
    }
    if !(snr > 0.0) {
        return Err(Error::invalid(format!("snr must be positive, got {snr}")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let beta = friedman_beta(p);
    let c = friedman_noise_scale(&beta, rho, snr);
    let (a, b) = (rho.sqrt(), (1.0 - rho).sqrt());
    let mut x = DMatrix::zeros(n, p);
    let mut y = DVector::zeros(n);
    for i in 0..n {
        let w: f64 = rng.sample(StandardNormal);
        for j in 0..p {
            let e: f64 = rng.sample(StandardNormal);
            x[(i, j)] = a * w + b * e;
        }
        let z: f64 = rng.sample(StandardNormal);
        y[i] = x.row(i).transpose().dot(&beta) + c * z;
    }
    Dataset::new(x, y)
}

/// Noiseless two-dimensional surface of the Yuan design.
pub fn yuan_surface(x1: f64, x2: f64) -> f64 {
    let num = 40.0 * (8.0 * ((x1 - 0.5).powi(2) + (x2 - 0.5).powi(2))).exp();
    let den = (8.0 * ((x1 - 0.2).powi(2) + (x2 - 0.7).powi(2))).exp()
        + (8.0 * ((x1 - 0.7).powi(2) + (x2 - 0.2).powi(2))).exp();
    num / den
}

pub fn simulate_yuan(n: usize, seed: u64) -> Result<Dataset> {
    if n < 1 {
        return Err(Error::invalid("need n >= 1"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut x = DMatrix::zeros(n, 2);
    let mut y = DVector::zeros(n);
    for i in 0..n {
        let x1: f64 = rng.random();
        let x2: f64 = rng.random();
        let z: f64 = rng.sample(StandardNormal);
        x[(i, 0)] = x1;
        x[(i, 1)] = x2;
        y[i] = yuan_surface(x1, x2) + z;
    }
    Dataset::new(x, y)
}

/// Conditional mean of the heteroscedastic design.
pub fn heteroscedastic_mean(x: f64) -> f64 {
    (2.0 * std::f64::consts::PI * x).sin()
}

/// `Y = sin(2πX) + (0.2 + X)·Z` with `X ~ U(0, 1)`.
pub fn simulate_heteroscedastic(n: usize, seed: u64) -> Result<Dataset> {
    if n < 2 {
        return Err(Error::invalid("need n >= 2"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut x = DMatrix::zeros(n, 1);
    let mut y = DVector::zeros(n);
    for i in 0..n {
        let xi: f64 = rng.random();
        let z: f64 = rng.sample(StandardNormal);
        x[(i, 0)] = xi;
        y[i] = heteroscedastic_mean(xi) + (0.2 + xi) * z;
    }
    Dataset::new(x, y)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn csv_with_header() {
        let ds = parse_csv("x1,x2,y\n1,2,3\n4,5,6\n7,8,9\n", &ResponseColumn::Last, &CsvOptions::default()).unwrap();
        assert_eq!((ds.n(), ds.p()), (3, 2));
        assert_eq!(ds.y, DVector::from_vec(vec![3.0, 6.0, 9.0]));
        assert_eq!(ds.x[(2, 1)], 8.0);
    }

    #[test]
    fn response_by_index_matches_name() {
        let text = "a,y,b\n1,2,3\n4,5,6\n";
        let by_name = parse_csv(text, &ResponseColumn::Name("y".into()), &CsvOptions::default()).unwrap();
        let by_index = parse_csv(text, &ResponseColumn::Index(1), &CsvOptions::default()).unwrap();
        assert_eq!(by_name, by_index);
        assert_eq!(by_name.x, DMatrix::from_row_slice(2, 2, &[1.0, 3.0, 4.0, 6.0]));
    }

    #[test]
    fn missing_value_names_location() {
        let err = parse_csv("x,y\n1,2\nNA,3\n", &ResponseColumn::Last, &CsvOptions::default()).unwrap_err();
        match err {
            Error::Parse { row, column, .. } => {
                assert_eq!(row, 3);
                assert_eq!(column, "x");
            }
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn headerless_input() {
        let ds = parse_csv("1,2\n3,4\n", &ResponseColumn::Index(0), &CsvOptions::default()).unwrap();
        assert!(ds.column_names.is_none());
        assert_eq!(ds.y, DVector::from_vec(vec![1.0, 3.0]));
    }

    #[test]
    fn covariate_only_table() {
        let x = parse_covariates_csv("x1,x2\n1,2\n3,4\n5,6\n", &CsvOptions::default()).unwrap();
        assert_eq!(x, DMatrix::from_row_slice(3, 2, &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0]));
        assert!(parse_covariates_csv("x\n1\n?\n", &CsvOptions::default()).is_err());
    }

    #[test]
    fn beta_values() {
        let b = friedman_beta(3);
        assert_eq!(b[0], -1.0);
        assert!((b[1] - (-0.1f64).exp()).abs() < 1e-15);
        assert!((b[2] + (-0.2f64).exp()).abs() < 1e-15);
    }

    #[test]
    fn noise_scale_vanishes_with_snr() {
        let b = friedman_beta(5);
        assert!(friedman_noise_scale(&b, 0.1, 1e12) < 1e-5);
    }

    #[test]
    fn generators_are_deterministic() {
        assert_eq!(simulate_friedman(20, 3, 0.1, 3.0, 9).unwrap(), simulate_friedman(20, 3, 0.1, 3.0, 9).unwrap());
        assert_eq!(simulate_yuan(20, 9).unwrap(), simulate_yuan(20, 9).unwrap());
        assert_eq!(simulate_heteroscedastic(20, 9).unwrap(), simulate_heteroscedastic(20, 9).unwrap());
        assert_ne!(simulate_yuan(20, 9).unwrap(), simulate_yuan(20, 10).unwrap());
    }

    #[test]
    fn friedman_rejects_bad_rho() {
        assert!(simulate_friedman(10, 2, 1.0, 3.0, 1).is_err());
        assert!(simulate_friedman(10, 2, -0.1, 3.0, 1).is_err());
    }

    #[test]
    fn yuan_surface_point_and_symmetry() {
        // At (0.45, 0.45): numerator 40·e^{0.04}; both denominator terms
        // have exponent 8·(0.0625 + 0.0625) = 1.
        let expected = 40.0 * 0.04f64.exp() / (2.0 * 1f64.exp());
        assert!((yuan_surface(0.45, 0.45) - expected).abs() < 1e-12);
        assert!((yuan_surface(0.3, 0.8) - yuan_surface(0.8, 0.3)).abs() < 1e-12);
        let ds = simulate_yuan(200, 3).unwrap();
        assert!(ds.x.iter().all(|v| (0.0..=1.0).contains(v)));
    }

    #[test]
    fn heteroscedastic_mean_is_bounded() {
        assert!((0..1000).all(|i| heteroscedastic_mean(i as f64 / 1000.0).abs() <= 1.0));
    }

    #[test]
    fn standardization_handles_constant_columns() {
        let x = DMatrix::from_row_slice(3, 2, &[1.0, 5.0, 2.0, 5.0, 3.0, 5.0]);
        let mut ds = Dataset::new(x, DVector::zeros(3)).unwrap();
        ds.standardize();
        let stats = ds.standardization.clone().unwrap();
        assert_eq!(stats[1].sd, 1.0);
        assert_eq!(ds.x.column(1).amax(), 0.0);
        assert!((ds.x[(0, 0)] + 1.0).abs() < 1e-15);
    }

    #[test]
    fn csv_round_trip() {
        let ds = simulate_yuan(5, 1).unwrap();
        let text = dataset_to_csv(&ds).unwrap();
        let back = parse_csv(&text, &ResponseColumn::Last, &CsvOptions::default()).unwrap();
        assert_eq!(back.x, ds.x);
        assert_eq!(back.y, ds.y);
    }

    #[test]
    fn prediction_header() {
        let one = DVector::from_vec(vec![1.5]);
        let s = predictions_to_csv(std::slice::from_ref(&one), None).unwrap();
        assert_eq!(s, "index,prediction\n0,1.5\n");
        let two = [one.clone(), DVector::from_vec(vec![2.5])];
        let s = predictions_to_csv(&two, Some(&[0.25, 0.75])).unwrap();
        assert_eq!(s, "index,prediction,tau\n0,1.5,0.25\n0,2.5,0.75\n");
        assert!(predictions_to_csv(&two, None).is_err());
    }
}

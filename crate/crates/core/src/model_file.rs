//! Versioned JSON model files.
//!
//! A file holds everything prediction needs: the kernel spec, the training
//! covariates (after standardization), the column statistics used to
//! standardize, and the fitted solution. Floats are written in shortest
//! round-trip form, so a save/load cycle is bit-exact.

use std::fs;
use std::path::Path;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::data::{apply_stats, write_atomic, ColumnStats};
use crate::error::{check_len, Error, Result};
use crate::eval::{predict, predict_levels};
use crate::kernel::KernelSpec;
use crate::nckqr::NckqrSolution;
use crate::solver::KqrSolution;

pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum Fit {
    Kqr(KqrSolution),
    Nckqr(NckqrSolution),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SavedModel {
    pub kernel: KernelSpec,
    #[serde(with = "rows")]
    pub x_train: DMatrix<f64>,
    #[serde(default)]
    pub standardization: Option<Vec<ColumnStats>>,
    #[serde(default)]
    pub column_names: Option<Vec<String>>,
    pub fit: Fit,
}

#[derive(Serialize, Deserialize)]
struct Envelope {
    format_version: u32,
    model: SavedModel,
}

impl SavedModel {
    pub fn taus(&self) -> Vec<f64> {
        match &self.fit {
            Fit::Kqr(s) => vec![s.tau.value()],
            Fit::Nckqr(s) => s.problem.taus.iter().map(|t| t.value()).collect(),
        }
    }

    /// Predictions for raw covariate rows, one vector per quantile level.
    /// The stored standardization is applied first.
    pub fn predict(&self, x_new: &DMatrix<f64>) -> Result<Vec<DVector<f64>>> {
        check_len(self.x_train.ncols(), x_new.ncols())?;
        let mut x = x_new.clone();
        if let Some(stats) = &self.standardization {
            apply_stats(&mut x, stats);
        }
        match &self.fit {
            Fit::Kqr(s) => Ok(vec![predict(s, &self.x_train, &x, &self.kernel)?]),
            Fit::Nckqr(s) => predict_levels(s, &self.x_train, &x, &self.kernel),
        }
    }

    pub fn to_json(&self) -> Result<String> {
        let env = EnvelopeRef {
            format_version: FORMAT_VERSION,
            model: self,
        };
        Ok(serde_json::to_string_pretty(&env)?)
    }

    pub fn from_json(text: &str, path: &Path) -> Result<Self> {
        let bad = |message: String| Error::ModelFormat {
            path: path.to_path_buf(),
            message,
        };
        let value: serde_json::Value = serde_json::from_str(text).map_err(|e| bad(e.to_string()))?;
        match value.get("format_version").and_then(|v| v.as_u64()) {
            Some(v) if v == u64::from(FORMAT_VERSION) => {}
            Some(v) => return Err(bad(format!("unsupported format_version {v}, expected {FORMAT_VERSION}"))),
            None => return Err(bad("missing format_version".into())),
        }
        let env: Envelope = serde_json::from_value(value).map_err(|e| bad(e.to_string()))?;
        let m = env.model;
        let n = m.x_train.nrows();
        let alpha_len = match &m.fit {
            Fit::Kqr(s) => vec![s.alpha.len()],
            Fit::Nckqr(s) => s.levels.iter().map(|c| c.alpha.len()).collect(),
        };
        if alpha_len.iter().any(|&l| l != n) {
            return Err(bad(format!("coefficients do not match {n} training rows")));
        }
        if m.standardization.as_ref().is_some_and(|s| s.len() != m.x_train.ncols()) {
            return Err(bad("standardization does not match covariate count".into()));
        }
        Ok(m)
    }
}

#[derive(Serialize)]
struct EnvelopeRef<'a> {
    format_version: u32,
    model: &'a SavedModel,
}

pub fn save_model(model: &SavedModel, path: &Path) -> Result<()> {
    write_atomic(path, model.to_json()?.as_bytes())
}

pub fn load_model(path: &Path) -> Result<SavedModel> {
    let text = fs::read_to_string(path)?;
    SavedModel::from_json(&text, path)
}

mod rows {
    use nalgebra::DMatrix;
    use serde::{de::Error as _, Deserialize, Deserializer, Serialize, Serializer};

    pub fn serialize<S: Serializer>(m: &DMatrix<f64>, s: S) -> Result<S::Ok, S::Error> {
        let rows: Vec<Vec<f64>> = m.row_iter().map(|r| r.iter().copied().collect()).collect();
        (m.ncols(), rows).serialize(s)
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<DMatrix<f64>, D::Error> {
        let (p, rows): (usize, Vec<Vec<f64>>) = Deserialize::deserialize(d)?;
        if rows.iter().any(|r| r.len() != p) {
            return Err(D::Error::custom("ragged covariate rows"));
        }
        Ok(DMatrix::from_fn(rows.len(), p, |i, j| rows[i][j]))
    }
}

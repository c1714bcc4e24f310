//! On-disk formats: the JSON fit artifact and shared number formatting.
//!
//! A fit artifact holds everything needed to rebuild a [`ModelFit`] and to
//! push new long-format data through the same preprocessing: time domain,
//! per-column scaling and whether the model was fit on de-meaned data.

use std::fs;
use std::path::Path;

use nalgebra::DVector;
use serde::{Deserialize, Serialize};

use crate::basis::{CenteredSplineBasis, SplineConfig};
use crate::data::{dataset_from_table, rescale_time, ColumnScaling, LongTable, LongitudinalDataset};
use crate::error::{Error, Result};
use crate::solver::{predict, Method, ModelFit, PenaltyConfig};
use crate::structure::{classify, StructuralPartition};

/// Shortest-exact scientific notation with 17 significant digits, so that
/// parsing the text recovers the same `f64`.
pub fn fmt_f64(x: f64) -> String {
    format!("{x:.16e}")
}

pub const ARTIFACT_VERSION: u32 = 1;

/// Preprocessing recorded alongside a fit. Subject means are not stored:
/// new data is de-meaned with its own subject means.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PreprocessingRecord {
    pub time_domain: (f64, f64),
    pub demeaned: bool,
    pub standardization: Option<Vec<ColumnScaling>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FitArtifact {
    pub version: u32,
    pub method: Method,
    pub penalty: PenaltyConfig,
    pub spline: SplineConfig,
    pub internal_knots: Vec<f64>,
    pub beta0: f64,
    pub mu: Vec<f64>,
    pub theta: Vec<Vec<f64>>,
    pub intercept: bool,
    pub objective_trace: Vec<f64>,
    pub iterations: usize,
    pub converged: bool,
    pub zeroed_in_final_sweep: Vec<bool>,
    pub covariate_names: Vec<String>,
    pub n_observations: usize,
    pub n_subjects: usize,
    pub preprocessing: PreprocessingRecord,
    pub threshold_multiplier: f64,
    pub partition: StructuralPartition,
}

impl FitArtifact {
    /// `dataset` is the preprocessed data the fit was computed on.
    pub fn new(fit: &ModelFit, dataset: &LongitudinalDataset, threshold_multiplier: f64) -> Result<Self> {
        if fit.p() != dataset.num_covariates() {
            return Err(Error::DimensionMismatch {
                what: "covariates in artifact",
                expected: dataset.num_covariates(),
                got: fit.p(),
            });
        }
        let n = dataset.num_observations();
        let partition = classify(fit, n, fit.p(), threshold_multiplier)?;
        let pre = dataset.preprocessing();
        Ok(Self {
            version: ARTIFACT_VERSION,
            method: fit.method,
            penalty: fit.penalty,
            spline: *fit.basis.config(),
            internal_knots: fit.basis.internal_knots().to_vec(),
            beta0: fit.beta0,
            mu: fit.mu.iter().copied().collect(),
            theta: fit.theta.iter().map(|t| t.iter().copied().collect()).collect(),
            intercept: fit.intercept,
            objective_trace: fit.objective_trace.clone(),
            iterations: fit.iterations,
            converged: fit.converged,
            zeroed_in_final_sweep: fit.zeroed_in_final_sweep.clone(),
            covariate_names: dataset.covariate_names().to_vec(),
            n_observations: n,
            n_subjects: dataset.num_subjects(),
            preprocessing: PreprocessingRecord {
                time_domain: dataset.time_domain(),
                demeaned: pre.demeaned,
                standardization: pre.standardization.clone(),
            },
            threshold_multiplier,
            partition,
        })
    }

    pub fn p(&self) -> usize {
        self.mu.len()
    }

    pub fn to_fit(&self) -> Result<ModelFit> {
        let basis = CenteredSplineBasis::with_internal_knots(self.spline, &self.internal_knots)?;
        let p = self.p();
        let q = basis.len();
        if self.theta.len() != p {
            return Err(Error::ArtifactMismatch(format!(
                "{} theta blocks for {p} covariates",
                self.theta.len()
            )));
        }
        if let Some(t) = self.theta.iter().find(|t| t.len() != q) {
            return Err(Error::ArtifactMismatch(format!(
                "theta block of length {} but the basis has {q} functions",
                t.len()
            )));
        }
        if self.covariate_names.len() != p {
            return Err(Error::ArtifactMismatch(format!(
                "{} covariate names for {p} coefficients",
                self.covariate_names.len()
            )));
        }
        Ok(ModelFit {
            beta0: self.beta0,
            mu: DVector::from_vec(self.mu.clone()),
            theta: self.theta.iter().map(|t| DVector::from_vec(t.clone())).collect(),
            objective_trace: self.objective_trace.clone(),
            iterations: self.iterations,
            converged: self.converged,
            method: self.method,
            penalty: self.penalty,
            basis,
            zeroed_in_final_sweep: self.zeroed_in_final_sweep.clone(),
            intercept: self.intercept,
        })
    }

    pub fn to_json(&self) -> Result<String> {
        let mut s = serde_json::to_string_pretty(self).map_err(|e| Error::Serialization(e.to_string()))?;
        s.push('\n');
        Ok(s)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let art: Self = serde_json::from_str(text).map_err(|e| Error::Serialization(e.to_string()))?;
        if art.version != ARTIFACT_VERSION {
            return Err(Error::ArtifactMismatch(format!(
                "artifact version {} is not supported (expected {ARTIFACT_VERSION})",
                art.version
            )));
        }
        Ok(art)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        fs::write(path, self.to_json()?).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text)
    }

    /// Applies the recorded preprocessing to a training-shaped table (the
    /// `y` column is required). Used to rebuild the design a fit came from.
    pub fn prepare_training(&self, table: &LongTable) -> Result<LongitudinalDataset> {
        self.check_columns(&table.covariate_names)?;
        let raw = dataset_from_table(table, Some(self.preprocessing.time_domain))?;
        let scaled = match &self.preprocessing.standardization {
            Some(s) => raw.apply_scaling(s),
            None => raw,
        };
        Ok(if self.preprocessing.demeaned {
            scaled.demean_within_subject()
        } else {
            scaled
        })
    }

    /// Row-level predictions for a table whose `y` column may be absent.
    /// Rows whose time falls outside the training time domain get an error
    /// instead of a value; they still contribute to their subject's
    /// covariate means when the model was fit on de-meaned data.
    pub fn predict_table(&self, table: &LongTable) -> Result<Vec<RowPrediction>> {
        self.check_columns(&table.covariate_names)?;
        let fit = self.to_fit()?;
        let identity = vec![ColumnScaling::IDENTITY; self.p()];
        let scalings = self.preprocessing.standardization.as_ref().unwrap_or(&identity);
        let scaled: Vec<Vec<f64>> = table
            .x
            .iter()
            .map(|row| row.iter().zip(scalings).map(|(x, s)| s.apply(*x)).collect())
            .collect();

        let groups = subject_groups(&table.subject);
        let mut offsets_x = vec![vec![0.0; self.p()]; table.len()];
        let mut offsets_y = vec![Some(0.0); table.len()];
        if self.preprocessing.demeaned {
            for rows in &groups {
                let m = rows.len() as f64;
                let mean_x: Vec<f64> = (0..self.p())
                    .map(|k| rows.iter().map(|&r| scaled[r][k]).sum::<f64>() / m)
                    .collect();
                let mean_y = table.y.as_ref().map(|y| rows.iter().map(|&r| y[r]).sum::<f64>() / m);
                for &r in rows {
                    offsets_x[r] = mean_x.clone();
                    offsets_y[r] = mean_y;
                }
            }
        }

        let (lo, hi) = self.preprocessing.time_domain;
        let mut out = Vec::with_capacity(table.len());
        for r in 0..table.len() {
            let u = rescale_time(table.time[r], lo, hi);
            let x: Vec<f64> = scaled[r].iter().zip(&offsets_x[r]).map(|(a, b)| a - b).collect();
            let result = if (0.0..=1.0).contains(&u) {
                predict(&fit, &x, u).map_err(|e| e.to_string())
            } else {
                Err(format!(
                    "time {} lies outside the training range [{lo}, {hi}]",
                    table.time[r]
                ))
            };
            out.push(RowPrediction {
                row: r + 1,
                subject: table.subject[r].clone(),
                time: table.time[r],
                prediction: result.as_ref().ok().copied(),
                response_scale: result.as_ref().ok().and_then(|v| offsets_y[r].map(|m| v + m)),
                error: result.err(),
            });
        }
        Ok(out)
    }

    fn check_columns(&self, names: &[String]) -> Result<()> {
        if names.len() != self.p() {
            return Err(Error::ArtifactMismatch(format!(
                "data has {} covariates but the fit expects {}",
                names.len(),
                self.p()
            )));
        }
        if let Some((a, b)) = names.iter().zip(&self.covariate_names).find(|(a, b)| a != b) {
            return Err(Error::ArtifactMismatch(format!(
                "covariate `{a}` found where the fit expects `{b}`"
            )));
        }
        Ok(())
    }
}

fn subject_groups(ids: &[String]) -> Vec<Vec<usize>> {
    let mut index = std::collections::HashMap::new();
    let mut groups: Vec<Vec<usize>> = Vec::new();
    for (r, id) in ids.iter().enumerate() {
        let g = *index.entry(id.as_str()).or_insert_with(|| {
            groups.push(Vec::new());
            groups.len() - 1
        });
        groups[g].push(r);
    }
    groups
}

/// One output row of [`FitArtifact::predict_table`]. `row` counts data rows
/// from 1. `prediction` is on the model's response scale (de-meaned when
/// the model was); `response_scale` adds back the subject's mean response,
/// which needs a `y` column when the model was fit on de-meaned data.
#[derive(Debug, Clone, PartialEq)]
pub struct RowPrediction {
    pub row: usize,
    pub subject: String,
    pub time: f64,
    pub prediction: Option<f64>,
    pub response_scale: Option<f64>,
    pub error: Option<String>,
}

/// Writes `row,subject,time,prediction,response_scale,error`.
pub fn write_predictions_csv(rows: &[RowPrediction], path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let mut w = csv::Writer::from_path(path).map_err(|e| Error::Serialization(e.to_string()))?;
    let opt = |v: Option<f64>| v.map(fmt_f64).unwrap_or_default();
    let ser = |e: csv::Error| Error::Serialization(e.to_string());
    w.write_record(["row", "subject", "time", "prediction", "response_scale", "error"])
        .map_err(ser)?;
    for r in rows {
        w.write_record([
            r.row.to_string(),
            r.subject.clone(),
            fmt_f64(r.time),
            opt(r.prediction),
            opt(r.response_scale),
            r.error.clone().unwrap_or_default(),
        ])
        .map_err(ser)?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

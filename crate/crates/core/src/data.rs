//! Longitudinal observations, preprocessing and stacked design blocks.
//!
//! Rows are stacked subject by subject in input order and, within a subject,
//! by increasing time. Every matrix built from a dataset uses that order.

use std::collections::HashMap;
use std::path::Path;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::artifact::fmt_f64;
use crate::basis::CenteredSplineBasis;
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct SubjectRecord {
    pub subject_id: String,
    pub times: Vec<f64>,
    pub responses: Vec<f64>,
    /// `n_i` rows of `p` covariates.
    pub covariates: Vec<Vec<f64>>,
}

impl SubjectRecord {
    pub fn len(&self) -> usize {
        self.times.len()
    }

    pub fn is_empty(&self) -> bool {
        self.times.is_empty()
    }

    fn sort_by_time(&mut self) {
        let mut order: Vec<usize> = (0..self.times.len()).collect();
        order.sort_by(|&a, &b| self.times[a].total_cmp(&self.times[b]));
        self.times = order.iter().map(|&i| self.times[i]).collect();
        self.responses = order.iter().map(|&i| self.responses[i]).collect();
        self.covariates = order.iter().map(|&i| self.covariates[i].clone()).collect();
    }
}

/// Affine map applied to one covariate column: `x' = (x - center) / scale`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ColumnScaling {
    pub center: f64,
    pub scale: f64,
}

impl ColumnScaling {
    pub const IDENTITY: ColumnScaling = ColumnScaling {
        center: 0.0,
        scale: 1.0,
    };

    pub fn apply(&self, x: f64) -> f64 {
        (x - self.center) / self.scale
    }

    pub fn restore(&self, x: f64) -> f64 {
        x * self.scale + self.center
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct PreprocessState {
    pub demeaned: bool,
    /// Per-subject response means removed by de-meaning.
    pub subject_means_y: Vec<f64>,
    /// Per-subject covariate means removed by de-meaning.
    pub subject_means_x: Vec<Vec<f64>>,
    /// Per-covariate scaling, present once standardized.
    pub standardization: Option<Vec<ColumnScaling>>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LongitudinalDataset {
    subjects: Vec<SubjectRecord>,
    covariate_names: Vec<String>,
    time_domain: (f64, f64),
    preprocessing: PreprocessState,
}

impl LongitudinalDataset {
    /// Builds a dataset from records whose times already lie in `[0, 1]`.
    /// Observations are sorted by time within each subject.
    pub fn new(subjects: Vec<SubjectRecord>, covariate_names: Vec<String>) -> Result<Self> {
        Self::with_time_domain(subjects, covariate_names, (0.0, 1.0))
    }

    pub(crate) fn with_time_domain(
        mut subjects: Vec<SubjectRecord>,
        covariate_names: Vec<String>,
        time_domain: (f64, f64),
    ) -> Result<Self> {
        let p = covariate_names.len();
        if subjects.is_empty() {
            return Err(Error::DegenerateDesign("dataset has no subjects".into()));
        }
        for s in &mut subjects {
            if s.is_empty() {
                return Err(Error::DegenerateDesign(format!(
                    "subject `{}` has no observations",
                    s.subject_id
                )));
            }
            if s.responses.len() != s.times.len() || s.covariates.len() != s.times.len() {
                return Err(Error::DimensionMismatch {
                    what: "subject rows",
                    expected: s.times.len(),
                    got: s.responses.len().min(s.covariates.len()),
                });
            }
            if let Some(row) = s.covariates.iter().find(|r| r.len() != p) {
                return Err(Error::DimensionMismatch {
                    what: "covariates per observation",
                    expected: p,
                    got: row.len(),
                });
            }
            if let Some(&t) = s.times.iter().find(|t| !(0.0..=1.0).contains(*t)) {
                return Err(Error::Domain(t));
            }
            let finite = s.responses.iter().all(|v| v.is_finite())
                && s.covariates.iter().flatten().all(|v| v.is_finite());
            if !finite {
                return Err(Error::DegenerateDesign(format!(
                    "subject `{}` has non-finite values",
                    s.subject_id
                )));
            }
            s.sort_by_time();
        }
        Ok(Self {
            subjects,
            covariate_names,
            time_domain,
            preprocessing: PreprocessState::default(),
        })
    }

    pub fn subjects(&self) -> &[SubjectRecord] {
        &self.subjects
    }

    pub fn covariate_names(&self) -> &[String] {
        &self.covariate_names
    }

    /// Original `(min, max)` of the time column before rescaling.
    pub fn time_domain(&self) -> (f64, f64) {
        self.time_domain
    }

    pub fn preprocessing(&self) -> &PreprocessState {
        &self.preprocessing
    }

    /// Number of subjects `N`.
    pub fn num_subjects(&self) -> usize {
        self.subjects.len()
    }

    /// Total number of observations `n`.
    pub fn num_observations(&self) -> usize {
        self.subjects.iter().map(SubjectRecord::len).sum()
    }

    pub fn num_covariates(&self) -> usize {
        self.covariate_names.len()
    }

    pub fn all_times(&self) -> Vec<f64> {
        self.subjects
            .iter()
            .flat_map(|s| s.times.iter().copied())
            .collect()
    }

    /// Dataset restricted to the given subjects (in the given order),
    /// preprocessing state carried over.
    pub fn subset(&self, subject_indices: &[usize]) -> Self {
        let pick = |v: &Vec<f64>| -> Vec<f64> {
            if v.is_empty() {
                Vec::new()
            } else {
                subject_indices.iter().map(|&i| v[i]).collect()
            }
        };
        let mut pre = self.preprocessing.clone();
        pre.subject_means_y = pick(&self.preprocessing.subject_means_y);
        if !pre.subject_means_x.is_empty() {
            pre.subject_means_x = subject_indices
                .iter()
                .map(|&i| self.preprocessing.subject_means_x[i].clone())
                .collect();
        }
        Self {
            subjects: subject_indices
                .iter()
                .map(|&i| self.subjects[i].clone())
                .collect(),
            covariate_names: self.covariate_names.clone(),
            time_domain: self.time_domain,
            preprocessing: pre,
        }
    }

    /// Pooled standardization to mean 0 and variance 1 per covariate.
    /// Columns listed in `exempt` (e.g. binary indicators) are left as is.
    pub fn standardize(&self, exempt: &[usize]) -> Result<Self> {
        let p = self.num_covariates();
        let n = self.num_observations() as f64;
        let mut scalings = Vec::with_capacity(p);
        for k in 0..p {
            if exempt.contains(&k) {
                scalings.push(ColumnScaling::IDENTITY);
                continue;
            }
            let column = || self.subjects.iter().flat_map(|s| s.covariates.iter().map(move |r| r[k]));
            let mean = column().sum::<f64>() / n;
            let var = column().map(|x| (x - mean).powi(2)).sum::<f64>() / n;
            if !(var > 0.0) || var.sqrt() <= 1e-12 * mean.abs().max(1.0) {
                return Err(Error::DegenerateColumn(self.covariate_names[k].clone()));
            }
            scalings.push(ColumnScaling {
                center: mean,
                scale: var.sqrt(),
            });
        }
        let mut out = self.apply_scaling(&scalings);
        out.preprocessing.standardization = Some(scalings);
        Ok(out)
    }

    /// Applies a given per-column scaling (e.g. one estimated on training
    /// data) without recording it.
    pub fn apply_scaling(&self, scalings: &[ColumnScaling]) -> Self {
        let mut out = self.clone();
        for s in &mut out.subjects {
            for row in &mut s.covariates {
                for (x, sc) in row.iter_mut().zip(scalings) {
                    *x = sc.apply(*x);
                }
            }
        }
        out
    }

    /// Inverse of [`standardize`](Self::standardize).
    pub fn unstandardize(&self) -> Self {
        let mut out = self.clone();
        if let Some(scalings) = out.preprocessing.standardization.take() {
            for s in &mut out.subjects {
                for row in &mut s.covariates {
                    for (x, sc) in row.iter_mut().zip(&scalings) {
                        *x = sc.restore(*x);
                    }
                }
            }
        }
        out
    }

    /// Subtracts subject-specific means from the response and every
    /// covariate. Idempotent.
    pub fn demean_within_subject(&self) -> Self {
        if self.preprocessing.demeaned {
            return self.clone();
        }
        let p = self.num_covariates();
        let mut out = self.clone();
        let mut means_y = Vec::with_capacity(out.subjects.len());
        let mut means_x = Vec::with_capacity(out.subjects.len());
        for s in &mut out.subjects {
            let ni = s.len() as f64;
            let my = s.responses.iter().sum::<f64>() / ni;
            s.responses.iter_mut().for_each(|y| *y -= my);
            let mx: Vec<f64> = (0..p)
                .map(|k| s.covariates.iter().map(|r| r[k]).sum::<f64>() / ni)
                .collect();
            for row in &mut s.covariates {
                for (x, m) in row.iter_mut().zip(&mx) {
                    *x -= m;
                }
            }
            means_y.push(my);
            means_x.push(mx);
        }
        out.preprocessing.demeaned = true;
        out.preprocessing.subject_means_y = means_y;
        out.preprocessing.subject_means_x = means_x;
        out
    }

    /// Stacks `y`, `X` and the blocks `Z_k` with rows `x_ijk · B̃(t_ij)ᵀ`.
    pub fn build_design(&self, basis: &CenteredSplineBasis) -> Result<DesignBlocks> {
        let n = self.num_observations();
        let p = self.num_covariates();
        let q = basis.len();
        let mut y = DVector::zeros(n);
        let mut x = DMatrix::zeros(n, p);
        let mut z = vec![DMatrix::zeros(n, q); p];
        let mut subject_of_row = Vec::with_capacity(n);
        let mut times = Vec::with_capacity(n);
        let mut row = 0;
        for (i, s) in self.subjects.iter().enumerate() {
            for j in 0..s.len() {
                let b = basis.eval_centered(s.times[j])?;
                y[row] = s.responses[j];
                for k in 0..p {
                    let xv = s.covariates[j][k];
                    x[(row, k)] = xv;
                    for l in 0..q {
                        z[k][(row, l)] = xv * b[l];
                    }
                }
                subject_of_row.push(i);
                times.push(s.times[j]);
                row += 1;
            }
        }
        Ok(DesignBlocks {
            y,
            x,
            z,
            intercept_included: !self.preprocessing.demeaned,
            subject_of_row,
            times,
        })
    }
}

/// Stacked response, constant-effect design and varying-effect blocks.
#[derive(Debug, Clone, PartialEq)]
pub struct DesignBlocks {
    pub y: DVector<f64>,
    /// `n × p` constant-effect design.
    pub x: DMatrix<f64>,
    /// One `n × q` block per covariate.
    pub z: Vec<DMatrix<f64>>,
    pub intercept_included: bool,
    pub subject_of_row: Vec<usize>,
    pub times: Vec<f64>,
}

impl DesignBlocks {
    pub fn n(&self) -> usize {
        self.y.len()
    }

    pub fn p(&self) -> usize {
        self.x.ncols()
    }

    pub fn q(&self) -> usize {
        self.z.first().map_or(0, |z| z.ncols())
    }

    /// `β₀ 1 + Xμ + Σ Z_k θ_k`.
    pub fn linear_predictor(&self, beta0: f64, mu: &DVector<f64>, theta: &[DVector<f64>]) -> DVector<f64> {
        let mut eta = &self.x * mu;
        eta.add_scalar_mut(beta0);
        for (zk, tk) in self.z.iter().zip(theta) {
            if tk.iter().any(|&v| v != 0.0) {
                eta += zk * tk;
            }
        }
        eta
    }
}

/// Long-format table as read from disk, before grouping or rescaling.
#[derive(Debug, Clone, PartialEq)]
pub struct LongTable {
    pub subject: Vec<String>,
    pub time: Vec<f64>,
    pub y: Option<Vec<f64>>,
    pub x: Vec<Vec<f64>>,
    pub covariate_names: Vec<String>,
}

impl LongTable {
    pub fn len(&self) -> usize {
        self.time.len()
    }

    pub fn is_empty(&self) -> bool {
        self.time.is_empty()
    }
}

/// Reads a `subject,time,y,x1..xp` file. Row numbers in errors count data
/// rows from 1 (the header is not counted). The `y` column is optional only
/// when `require_y` is false.
pub fn read_long_csv(path: &Path, require_y: bool) -> Result<LongTable> {
    let mut reader = csv::ReaderBuilder::new()
        .trim(csv::Trim::All)
        .from_path(path)
        .map_err(|e| csv_error(path, e))?;
    let headers = reader.headers().map_err(|e| csv_error(path, e))?.clone();
    let find = |name: &str| headers.iter().position(|h| h.eq_ignore_ascii_case(name));
    let missing = |name: &str| Error::Parse {
        row: 0,
        column: name.to_string(),
        message: "required column missing from header".into(),
    };
    let subject_col = find("subject").ok_or_else(|| missing("subject"))?;
    let time_col = find("time").ok_or_else(|| missing("time"))?;
    let y_col = find("y");
    if require_y && y_col.is_none() {
        return Err(missing("y"));
    }
    let cov_cols: Vec<usize> = (0..headers.len())
        .filter(|&c| c != subject_col && c != time_col && Some(c) != y_col)
        .collect();
    if cov_cols.is_empty() {
        return Err(Error::Parse {
            row: 0,
            column: "x1".into(),
            message: "no covariate columns in header".into(),
        });
    }
    let covariate_names: Vec<String> = cov_cols.iter().map(|&c| headers[c].to_string()).collect();

    let mut table = LongTable {
        subject: Vec::new(),
        time: Vec::new(),
        y: y_col.map(|_| Vec::new()),
        x: Vec::new(),
        covariate_names,
    };
    for (idx, record) in reader.records().enumerate() {
        let row = idx + 1;
        let record = record.map_err(|e| Error::Parse {
            row,
            column: String::new(),
            message: e.to_string(),
        })?;
        let cell = |c: usize| -> Result<f64> {
            let raw = record.get(c).unwrap_or("");
            let v: f64 = raw.parse().map_err(|_| Error::Parse {
                row,
                column: headers[c].to_string(),
                message: format!("`{raw}` is not a number"),
            })?;
            if v.is_nan() || v.is_infinite() {
                return Err(Error::Parse {
                    row,
                    column: headers[c].to_string(),
                    message: "missing or non-finite value".into(),
                });
            }
            Ok(v)
        };
        let sid = record.get(subject_col).unwrap_or("").to_string();
        if sid.is_empty() {
            return Err(Error::Parse {
                row,
                column: headers[subject_col].to_string(),
                message: "empty subject id".into(),
            });
        }
        table.subject.push(sid);
        table.time.push(cell(time_col)?);
        if let (Some(c), Some(ys)) = (y_col, table.y.as_mut()) {
            ys.push(cell(c)?);
        }
        table.x.push(cov_cols.iter().map(|&c| cell(c)).collect::<Result<_>>()?);
    }
    if table.is_empty() {
        return Err(Error::Parse {
            row: 0,
            column: String::new(),
            message: format!("{} contains no data rows", path.display()),
        });
    }
    Ok(table)
}

fn csv_error(path: &Path, e: csv::Error) -> Error {
    match e.into_kind() {
        csv::ErrorKind::Io(io) => Error::io(path, io),
        other => Error::Parse {
            row: 0,
            column: String::new(),
            message: format!("{other:?}"),
        },
    }
}

/// Groups table rows by subject (first-appearance order) and maps times to
/// `[0, 1]` linearly using `domain`, or the pooled `(min, max)` when `None`.
pub fn dataset_from_table(table: &LongTable, domain: Option<(f64, f64)>) -> Result<LongitudinalDataset> {
    let ys = table.y.as_ref().ok_or_else(|| Error::Parse {
        row: 0,
        column: "y".into(),
        message: "required column missing from header".into(),
    })?;
    let (lo, hi) = match domain {
        Some(d) => d,
        None => {
            let lo = table.time.iter().copied().fold(f64::INFINITY, f64::min);
            let hi = table.time.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            (lo, hi)
        }
    };
    if !(hi > lo) {
        return Err(Error::DegenerateDesign(
            "time column has zero range; cannot rescale to [0, 1]".into(),
        ));
    }
    let mut index: HashMap<&str, usize> = HashMap::new();
    let mut subjects: Vec<SubjectRecord> = Vec::new();
    for r in 0..table.len() {
        let id = table.subject[r].as_str();
        let pos = *index.entry(id).or_insert_with(|| {
            subjects.push(SubjectRecord {
                subject_id: id.to_string(),
                times: Vec::new(),
                responses: Vec::new(),
                covariates: Vec::new(),
            });
            subjects.len() - 1
        });
        let s = &mut subjects[pos];
        s.times.push(rescale_time(table.time[r], lo, hi));
        s.responses.push(ys[r]);
        s.covariates.push(table.x[r].clone());
    }
    LongitudinalDataset::with_time_domain(subjects, table.covariate_names.clone(), (lo, hi))
}

pub(crate) fn rescale_time(t: f64, lo: f64, hi: f64) -> f64 {
    let u = (t - lo) / (hi - lo);
    // snap round-off at the ends
    if u.abs() < 1e-14 {
        0.0
    } else if (u - 1.0).abs() < 1e-14 {
        1.0
    } else {
        u
    }
}

/// Reads a long-format CSV and rescales time to `[0, 1]` by the pooled range.
pub fn load_long_csv(path: impl AsRef<Path>) -> Result<LongitudinalDataset> {
    let table = read_long_csv(path.as_ref(), true)?;
    dataset_from_table(&table, None)
}

/// Writes the dataset as `subject,time,y,<covariates>` with times mapped back
/// to the dataset's time domain. Values are written as stored, so a
/// preprocessed dataset is written on its preprocessed scale.
pub fn write_long_csv(dataset: &LongitudinalDataset, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let ser = |e: csv::Error| Error::Serialization(format!("{}: {e}", path.display()));
    let mut w = csv::Writer::from_path(path).map_err(ser)?;
    let mut header = vec!["subject".to_string(), "time".into(), "y".into()];
    header.extend(dataset.covariate_names().iter().cloned());
    w.write_record(&header).map_err(ser)?;
    let (lo, hi) = dataset.time_domain();
    for s in dataset.subjects() {
        for j in 0..s.len() {
            let mut rec = vec![
                s.subject_id.clone(),
                fmt_f64(lo + s.times[j] * (hi - lo)),
                fmt_f64(s.responses[j]),
            ];
            rec.extend(s.covariates[j].iter().map(|&x| fmt_f64(x)));
            w.write_record(&rec).map_err(ser)?;
        }
    }
    w.flush().map_err(|e| Error::io(path, e))
}

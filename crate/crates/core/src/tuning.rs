//! Penalty selection over a `(λ₁, λ₂)` grid by extended BIC or subject-wise
//! K-fold cross-validation.
//!
//! Each `λ₂` column is fitted along a descending `λ₁` path with warm starts;
//! columns are independent and run in parallel. Results are assembled by grid
//! position, so the surface does not depend on scheduling.

use std::io::Write;
use std::path::Path;

use nalgebra::DMatrix;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::artifact::fmt_f64;
use crate::basis::CenteredSplineBasis;
use crate::data::{DesignBlocks, LongitudinalDataset};
use crate::error::{Error, Result};
use crate::solver::{constants_only_fit, fit_method_cached, BlockCache, Method, ModelFit, PenaltyConfig, SolverOptions};
use crate::structure::select_vary;

pub const DEFAULT_GAMMA: f64 = 0.5;
pub const DEFAULT_NUM_LAMBDA1: usize = 20;
/// Smallest default `λ₁` as a fraction of `λ₁,max`.
pub const DEFAULT_LAMBDA1_RATIO: f64 = 1e-3;
pub const DEFAULT_LAMBDA2_RANGE: (f64, f64) = (1e-4, 1.0);
pub const DEFAULT_NUM_LAMBDA2: usize = 5;

/// Two-dimensional penalty grid, both axes sorted in descending order.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TuningGrid {
    pub lambda1_values: Vec<f64>,
    pub lambda2_values: Vec<f64>,
    #[serde(default = "default_gamma")]
    pub gamma: f64,
}

fn default_gamma() -> f64 {
    DEFAULT_GAMMA
}

/// `count` values from `hi` down to `lo`, equally spaced on the log scale.
pub fn log_spaced(hi: f64, lo: f64, count: usize) -> Vec<f64> {
    match count {
        0 => Vec::new(),
        1 => vec![hi],
        _ => {
            let (a, b) = (hi.ln(), lo.ln());
            (0..count)
                .map(|i| {
                    if i == 0 {
                        hi
                    } else if i == count - 1 {
                        lo
                    } else {
                        (a + (b - a) * i as f64 / (count - 1) as f64).exp()
                    }
                })
                .collect()
        }
    }
}

impl TuningGrid {
    /// Sorts both axes in descending order, removes duplicates and checks
    /// that every value is finite and non-negative.
    pub fn new(mut lambda1_values: Vec<f64>, mut lambda2_values: Vec<f64>, gamma: f64) -> Result<Self> {
        for axis in [&mut lambda1_values, &mut lambda2_values] {
            axis.sort_by(|a, b| b.total_cmp(a));
            axis.dedup();
        }
        let grid = Self {
            lambda1_values,
            lambda2_values,
            gamma,
        };
        grid.validate()?;
        Ok(grid)
    }

    pub fn validate(&self) -> Result<()> {
        if self.lambda1_values.is_empty() || self.lambda2_values.is_empty() {
            return Err(Error::Config("tuning grid axes must be non-empty".into()));
        }
        for axis in [&self.lambda1_values, &self.lambda2_values] {
            if axis.iter().any(|v| !(v.is_finite() && *v >= 0.0)) {
                return Err(Error::Config("tuning grid values must be finite and non-negative".into()));
            }
            if axis.windows(2).any(|w| w[0] <= w[1]) {
                return Err(Error::Config("tuning grid axes must be strictly descending".into()));
            }
        }
        if !(0.0..=1.0).contains(&self.gamma) {
            return Err(Error::Config(format!("EBIC gamma must lie in [0, 1], got {}", self.gamma)));
        }
        Ok(())
    }

    /// Default grid anchored at [`lambda1_max`]: 20 log-spaced `λ₁` from
    /// `λ₁,max` to `10⁻³·λ₁,max` and 5 log-spaced `λ₂` in `[10⁻⁴, 1]`.
    pub fn default_for(design: &DesignBlocks) -> Result<Self> {
        let l1max = lambda1_max(design)?;
        let l1 = if l1max > 0.0 {
            log_spaced(l1max, DEFAULT_LAMBDA1_RATIO * l1max, DEFAULT_NUM_LAMBDA1)
        } else {
            vec![0.0]
        };
        let l2 = log_spaced(DEFAULT_LAMBDA2_RANGE.1, DEFAULT_LAMBDA2_RANGE.0, DEFAULT_NUM_LAMBDA2);
        Self::new(l1, l2, DEFAULT_GAMMA)
    }

    /// Axes actually explored for `method`: VC-Ridge ignores `λ₁` and the
    /// Group-Lasso-based methods ignore `λ₂`, so those axes collapse to `{0}`.
    pub fn for_method(&self, method: Method) -> Self {
        let mut g = self.clone();
        match method {
            Method::TvSelect => {}
            Method::VcRidge => g.lambda1_values = vec![0.0],
            Method::GroupLasso | Method::ScreenRefit => g.lambda2_values = vec![0.0],
        }
        g
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Criterion {
    Ebic,
    CvMspe,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TuningOptions {
    pub solver: SolverOptions,
    /// Start each fit along a `λ₁` path from the previous one.
    pub warm_start: bool,
}

impl Default for TuningOptions {
    fn default() -> Self {
        Self {
            solver: SolverOptions::default(),
            warm_start: true,
        }
    }
}

#[derive(Debug, Clone)]
pub struct TuningResult {
    pub method: Method,
    pub criterion: Criterion,
    /// The axes actually explored (see [`TuningGrid::for_method`]).
    pub grid: TuningGrid,
    pub best_lambda1: f64,
    pub best_lambda2: f64,
    /// Rows follow `grid.lambda1_values`, columns `grid.lambda2_values`.
    /// Failed fits are stored as NaN.
    pub criterion_surface: DMatrix<f64>,
    pub best_fit: ModelFit,
    pub failed_fits: usize,
}

impl TuningResult {
    pub fn best_criterion(&self) -> f64 {
        let i = self.grid.lambda1_values.iter().position(|&v| v == self.best_lambda1).unwrap_or(0);
        let j = self.grid.lambda2_values.iter().position(|&v| v == self.best_lambda2).unwrap_or(0);
        self.criterion_surface[(i, j)]
    }

    /// `lambda1,lambda2,criterion` rows, `λ₁` descending, then `λ₂` descending.
    pub fn write_surface_csv(&self, mut out: impl Write) -> std::io::Result<()> {
        writeln!(out, "lambda1,lambda2,criterion")?;
        for (i, l1) in self.grid.lambda1_values.iter().enumerate() {
            for (j, l2) in self.grid.lambda2_values.iter().enumerate() {
                writeln!(
                    out,
                    "{},{},{}",
                    fmt_f64(*l1),
                    fmt_f64(*l2),
                    fmt_f64(self.criterion_surface[(i, j)])
                )?;
            }
        }
        Ok(())
    }

    pub fn save_surface_csv(&self, path: &Path) -> Result<()> {
        let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        let mut w = std::io::BufWriter::new(file);
        self.write_surface_csv(&mut w)
            .and_then(|_| w.flush())
            .map_err(|e| Error::io(path, e))
    }
}

/// `max_k ‖Z_kᵀy₀/n‖₂` with `y₀` the residual of the constants-only fit.
/// For `λ₁` at or above this value every deviation block is zero at the
/// optimum.
pub fn lambda1_max(design: &DesignBlocks) -> Result<f64> {
    let (b0, mu) = constants_only_fit(design, design.intercept_included)?;
    let mut r = &design.y - &design.x * mu;
    r.add_scalar_mut(-b0);
    let n = design.n() as f64;
    Ok(design
        .z
        .iter()
        .map(|zk| (zk.tr_mul(&r) / n).norm())
        .fold(0.0, f64::max))
}

/// `log(RSS/n) + (log n/n)·(p + q|Ŝ_vary|) + (2γ log p/n)·|Ŝ_vary|`.
/// A perfect fit (`RSS = 0`) scores `-∞`.
pub fn ebic(fit: &ModelFit, design: &DesignBlocks, gamma: f64) -> f64 {
    let n = design.n() as f64;
    let p = design.p();
    let s = select_vary(fit).len() as f64;
    let rss = fit.rss(design);
    if rss == 0.0 {
        return f64::NEG_INFINITY;
    }
    let df = p as f64 + fit.q() as f64 * s;
    (rss / n).ln() + n.ln() / n * df + 2.0 * gamma * (p as f64).ln() / n * s
}

/// EBIC tuning of TV-Select.
pub fn tune_ebic(
    design: &DesignBlocks,
    basis: &CenteredSplineBasis,
    grid: &TuningGrid,
    options: &TuningOptions,
) -> Result<TuningResult> {
    tune_method_ebic(design, basis, Method::TvSelect, grid, options)
}

/// EBIC tuning of any method; the same criterion is used for all of them.
pub fn tune_method_ebic(
    design: &DesignBlocks,
    basis: &CenteredSplineBasis,
    method: Method,
    grid: &TuningGrid,
    options: &TuningOptions,
) -> Result<TuningResult> {
    grid.validate()?;
    let grid = grid.for_method(method);
    let cache = BlockCache::new(design);
    let columns = fit_columns(design, basis, method, &grid, options, &cache);
    let gamma = grid.gamma;
    let scored: Vec<Vec<(f64, Option<ModelFit>)>> = columns
        .into_iter()
        .map(|col| {
            col.into_iter()
                .map(|f| match f {
                    Ok(fit) => (ebic(&fit, design, gamma), Some(fit)),
                    Err(_) => (f64::NAN, None),
                })
                .collect()
        })
        .collect();
    let (surface, failed) = surface_of(&grid, |i, j| scored[j][i].0);
    let (bi, bj) = argmin(&surface)?;
    let best_fit = scored[bj][bi].1.clone().expect("minimizer has a fit");
    Ok(TuningResult {
        method,
        criterion: Criterion::Ebic,
        best_lambda1: grid.lambda1_values[bi],
        best_lambda2: grid.lambda2_values[bj],
        grid,
        criterion_surface: surface,
        best_fit,
        failed_fits: failed,
    })
}

/// Subject ids sorted, shuffled with `seed`, and dealt round-robin into `k`
/// folds. Returns the fold of each subject (in dataset order).
pub fn subject_folds(dataset: &LongitudinalDataset, k: usize, seed: u64) -> Result<Vec<usize>> {
    let n_subj = dataset.num_subjects();
    if k < 2 {
        return Err(Error::Config(format!("cross-validation needs K >= 2, got {k}")));
    }
    if k > n_subj {
        return Err(Error::Config(format!("K = {k} exceeds the number of subjects ({n_subj})")));
    }
    let mut order: Vec<usize> = (0..n_subj).collect();
    order.sort_by(|&a, &b| dataset.subjects()[a].subject_id.cmp(&dataset.subjects()[b].subject_id));
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    order.shuffle(&mut rng);
    let mut folds = vec![0; n_subj];
    for (pos, &s) in order.iter().enumerate() {
        folds[s] = pos % k;
    }
    Ok(folds)
}

/// Subject-wise K-fold cross-validation of TV-Select.
pub fn tune_cv(
    dataset: &LongitudinalDataset,
    basis: &CenteredSplineBasis,
    grid: &TuningGrid,
    k: usize,
    seed: u64,
    options: &TuningOptions,
) -> Result<TuningResult> {
    tune_method_cv(dataset, basis, Method::TvSelect, grid, k, seed, options)
}

/// Subject-wise K-fold cross-validation. The criterion is the mean squared
/// prediction error over all held-out rows; the returned fit is refitted on
/// the full data at the selected pair.
pub fn tune_method_cv(
    dataset: &LongitudinalDataset,
    basis: &CenteredSplineBasis,
    method: Method,
    grid: &TuningGrid,
    k: usize,
    seed: u64,
    options: &TuningOptions,
) -> Result<TuningResult> {
    grid.validate()?;
    let grid = grid.for_method(method);
    let folds = subject_folds(dataset, k, seed)?;
    let (n1, n2) = (grid.lambda1_values.len(), grid.lambda2_values.len());
    let mut sse = DMatrix::<f64>::zeros(n1, n2);
    let mut held_out = 0usize;
    for fold in 0..k {
        let train_idx: Vec<usize> = (0..folds.len()).filter(|&s| folds[s] != fold).collect();
        let test_idx: Vec<usize> = (0..folds.len()).filter(|&s| folds[s] == fold).collect();
        let train = dataset.subset(&train_idx).build_design(basis)?;
        let test = dataset.subset(&test_idx).build_design(basis)?;
        held_out += test.n();
        let cache = BlockCache::new(&train);
        let columns = fit_columns(&train, basis, method, &grid, options, &cache);
        for (j, col) in columns.into_iter().enumerate() {
            for (i, f) in col.into_iter().enumerate() {
                sse[(i, j)] += match f {
                    Ok(fit) => fit.rss(&test),
                    Err(_) => f64::NAN,
                };
            }
        }
    }
    let (surface, failed) = surface_of(&grid, |i, j| sse[(i, j)] / held_out as f64);
    let (bi, bj) = argmin(&surface)?;
    let full = dataset.build_design(basis)?;
    let penalty = PenaltyConfig::new(grid.lambda1_values[bi], grid.lambda2_values[bj]);
    let best_fit = fit_method_cached(
        &full,
        basis,
        method,
        &penalty,
        &options.solver,
        &BlockCache::new(&full),
        None,
    )?;
    Ok(TuningResult {
        method,
        criterion: Criterion::CvMspe,
        best_lambda1: grid.lambda1_values[bi],
        best_lambda2: grid.lambda2_values[bj],
        grid,
        criterion_surface: surface,
        best_fit,
        failed_fits: failed,
    })
}

/// Fits every grid point; outer index is the `λ₂` column, inner the `λ₁` row.
fn fit_columns(
    design: &DesignBlocks,
    basis: &CenteredSplineBasis,
    method: Method,
    grid: &TuningGrid,
    options: &TuningOptions,
    cache: &BlockCache,
) -> Vec<Vec<Result<ModelFit>>> {
    grid.lambda2_values
        .par_iter()
        .map(|&l2| {
            let mut prev: Option<ModelFit> = None;
            grid.lambda1_values
                .iter()
                .map(|&l1| {
                    let penalty = PenaltyConfig::new(l1, l2);
                    let start = if options.warm_start { prev.as_ref() } else { None };
                    let fit = fit_method_cached(design, basis, method, &penalty, &options.solver, cache, start);
                    if let Ok(f) = &fit {
                        prev = Some(f.clone());
                    }
                    fit
                })
                .collect()
        })
        .collect()
}

fn surface_of(grid: &TuningGrid, value: impl Fn(usize, usize) -> f64) -> (DMatrix<f64>, usize) {
    let (n1, n2) = (grid.lambda1_values.len(), grid.lambda2_values.len());
    let surface = DMatrix::from_fn(n1, n2, value);
    let failed = surface.iter().filter(|v| v.is_nan()).count();
    (surface, failed)
}

/// Position of the smallest non-NaN entry. Rows (and columns) are in
/// descending penalty order, so scanning row-major and keeping the first
/// strict improvement breaks ties toward larger `λ₁`, then larger `λ₂`.
fn argmin(surface: &DMatrix<f64>) -> Result<(usize, usize)> {
    let mut best: Option<(usize, usize, f64)> = None;
    for i in 0..surface.nrows() {
        for j in 0..surface.ncols() {
            let v = surface[(i, j)];
            if v.is_nan() {
                continue;
            }
            let better = match best {
                None => true,
                Some((_, _, b)) => {
                    if b == f64::NEG_INFINITY {
                        false
                    } else {
                        v < b - 1e-12 * (1.0 + b.abs())
                    }
                }
            };
            if better {
                best = Some((i, j, v));
            }
        }
    }
    best.map(|(i, j, _)| (i, j))
        .ok_or_else(|| Error::Tuning("every fit on the tuning grid failed".into()))
}

//! Data-generating scenarios, per-replication scoring and replicated
//! comparison studies.
//!
//! Covariates follow `x_i ~ N(0, Σ)` with `Σ_kℓ = ρ^|k−ℓ|` and effects
//! `β_k(t) = μ_0k + g_0k(t)`: the first `s_v` covariates vary in time, the
//! next `s_c` are constant (`±1`, split evenly) and the rest are null. The
//! intercept is zero.
//!
//! Fits are computed on standardized covariates with an intercept and no
//! within-subject de-meaning (baseline covariates are constant within a
//! subject, so de-meaning would remove them). Estimated curves are mapped back
//! to the original covariate scale before they are compared with the truth.

use std::collections::BTreeSet;
use std::f64::consts::PI;
use std::fmt;
use std::io::Write;
use std::path::Path;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal, StudentT};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::artifact::fmt_f64;
use crate::basis::{CenteredSplineBasis, SplineConfig};
use crate::data::{ColumnScaling, LongitudinalDataset, SubjectRecord};
use crate::error::{Error, Result};
use crate::quadrature::composite_gauss_legendre;
use crate::solver::{Method, ModelFit, SolverOptions};
use crate::structure::{classify, select_vary, EffectClass, StructuralPartition};
use crate::tuning::{tune_method_ebic, TuningGrid, TuningOptions, DEFAULT_GAMMA};

/// Points of the equally spaced grid used for ISE and curve output.
pub const CURVE_GRID_SIZE: usize = 200;
/// Test-set size used for MSPE.
pub const DEFAULT_TEST_SUBJECTS: usize = 500;
/// Fraction of failed replications above which a study is an error.
pub const MAX_FAILURE_FRACTION: f64 = 0.10;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Scenario {
    A,
    B,
    C,
    D,
    E,
    F,
}

impl Scenario {
    pub const ALL: [Scenario; 6] = [Scenario::A, Scenario::B, Scenario::C, Scenario::D, Scenario::E, Scenario::F];

    fn index(self) -> u64 {
        self as u64
    }
}

impl fmt::Display for Scenario {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{self:?}")
    }
}

impl FromStr for Scenario {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_uppercase().as_str() {
            "A" => Ok(Scenario::A),
            "B" => Ok(Scenario::B),
            "C" => Ok(Scenario::C),
            "D" => Ok(Scenario::D),
            "E" => Ok(Scenario::E),
            "F" => Ok(Scenario::F),
            other => Err(Error::Config(format!("unknown scenario `{other}` (expected A-F)"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ErrorModel {
    Gauss,
    /// Student-t draws rescaled to variance `σ²`; requires `ν > 2`.
    StudentT { nu: f64 },
    /// `σ(t) = σ{1 + 0.5 sin(2πt)}`.
    Heteroscedastic,
    /// Within-subject `corr(ε_ij, ε_iℓ) = α^|j−ℓ|`.
    Ar1,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TimeDesign {
    /// `t_ij = (j−1)/(n_i−1)`.
    Regular,
    /// Sorted `Uniform(0, 1)` draws per subject.
    Irregular,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CovariateDesign {
    /// `x_ijk = x_ik`.
    Baseline,
    /// `x_ijk = x_ik + δ_ijk`, `δ_ijk ~ N(0, σ_x²)`.
    TimeVarying,
}

/// One simulation configuration.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScenarioSpec {
    pub scenario: Scenario,
    pub n_subjects: usize,
    pub n_obs: usize,
    pub p: usize,
    pub rho: f64,
    pub alpha: f64,
    pub sigma: f64,
    pub sigma_x2: f64,
    pub amplitude: f64,
    pub error_model: ErrorModel,
    pub time_design: TimeDesign,
    pub covariate_design: CovariateDesign,
    pub s_v: usize,
    pub s_c: usize,
    pub q: usize,
    pub seed: u64,
}

/// Basis size used for a configuration: 8 up to 1000 observations, then 10
/// up to `p = 200` and 12 beyond.
pub fn default_q(n_subjects: usize, n_obs: usize, p: usize) -> usize {
    if n_subjects * n_obs <= 1000 {
        8
    } else if p <= 200 {
        10
    } else {
        12
    }
}

impl ScenarioSpec {
    /// Scenario defaults for `(N, n_i, p)`: `σ = 1`, `s_v = s_c = 6` (capped
    /// by `p`), `ρ = 0.3`, `α = 0.3`, `σ_x² = 0.1`, amplitude 1, `q` from
    /// [`default_q`].
    pub fn new(scenario: Scenario, n_subjects: usize, n_obs: usize, p: usize) -> Self {
        let s_v = 6.min(p);
        let s_c = 6.min(p - s_v);
        let mut spec = Self {
            scenario,
            n_subjects,
            n_obs,
            p,
            rho: 0.3,
            alpha: 0.3,
            sigma: 1.0,
            sigma_x2: 0.1,
            amplitude: 1.0,
            error_model: ErrorModel::Gauss,
            time_design: TimeDesign::Irregular,
            covariate_design: CovariateDesign::Baseline,
            s_v,
            s_c,
            q: default_q(n_subjects, n_obs, p),
            seed: 0,
        };
        match scenario {
            Scenario::A | Scenario::F => {}
            Scenario::B => spec.rho = 0.6,
            Scenario::C => {
                spec.time_design = TimeDesign::Regular;
                spec.error_model = ErrorModel::Ar1;
            }
            Scenario::D => spec.error_model = ErrorModel::StudentT { nu: 3.0 },
            Scenario::E => spec.covariate_design = CovariateDesign::TimeVarying,
        }
        spec.enforce_scenario();
        spec
    }

    pub fn with_sparsity(mut self, s_v: usize, s_c: usize) -> Self {
        self.s_v = s_v;
        self.s_c = s_c;
        self
    }

    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self
    }

    /// Resets the settings a scenario pins (B: `ρ = 0.6`; F: amplitude 0.5)
    /// and returns a note for every value that was changed.
    pub fn enforce_scenario(&mut self) -> Vec<String> {
        let mut notes = Vec::new();
        match self.scenario {
            Scenario::B if self.rho != 0.6 => {
                notes.push(format!("scenario B uses rho = 0.6 (requested {})", self.rho));
                self.rho = 0.6;
            }
            Scenario::F if self.amplitude != 0.5 => {
                notes.push(format!("scenario F uses amplitude 0.5 (requested {})", self.amplitude));
                self.amplitude = 0.5;
            }
            _ => {}
        }
        notes
    }

    /// `(N,n_i,p)` label used in study tables.
    pub fn config_label(&self) -> String {
        format!("({},{},{})", self.n_subjects, self.n_obs, self.p)
    }

    pub fn validate(&self) -> Result<()> {
        let err = |m: String| Err(Error::Config(m));
        if self.n_subjects == 0 || self.n_obs == 0 || self.p == 0 {
            return err("N, n_i and p must be positive".into());
        }
        if self.s_v > TEMPLATE_COUNT {
            return err(format!("s_v = {} exceeds the {TEMPLATE_COUNT} available deviation shapes", self.s_v));
        }
        if self.s_v + self.s_c > self.p {
            return err(format!("s_v + s_c = {} exceeds p = {}", self.s_v + self.s_c, self.p));
        }
        if !(self.sigma > 0.0) || !self.sigma.is_finite() {
            return err(format!("sigma must be positive, got {}", self.sigma));
        }
        if !(self.rho > -1.0 && self.rho < 1.0) {
            return err(format!("rho must lie in (-1, 1), got {}", self.rho));
        }
        if !(self.alpha > -1.0 && self.alpha < 1.0) {
            return err(format!("alpha must lie in (-1, 1), got {}", self.alpha));
        }
        if !(self.sigma_x2 >= 0.0) {
            return err(format!("sigma_x2 must be non-negative, got {}", self.sigma_x2));
        }
        if !self.amplitude.is_finite() {
            return err("amplitude must be finite".into());
        }
        if let ErrorModel::StudentT { nu } = self.error_model {
            if !(nu > 2.0) {
                return err(format!("Student-t errors need nu > 2 for finite variance, got {nu}"));
            }
        }
        match self.scenario {
            Scenario::B if self.rho != 0.6 => return err("scenario B requires rho = 0.6".into()),
            Scenario::F if self.amplitude != 0.5 => return err("scenario F requires amplitude 0.5".into()),
            _ => {}
        }
        SplineConfig::cubic(self.q)?;
        Ok(())
    }
}

const TEMPLATE_COUNT: usize = 6;

/// The six deviation shapes `g̃₁..g̃₆` before centering.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Template {
    Sin2Pi,
    Cos2Pi,
    Sin4Pi,
    Cos4Pi,
    Bump,
    SinPi,
}

impl Template {
    pub const ALL: [Template; TEMPLATE_COUNT] = [
        Template::Sin2Pi,
        Template::Cos2Pi,
        Template::Sin4Pi,
        Template::Cos4Pi,
        Template::Bump,
        Template::SinPi,
    ];

    pub fn value(self, t: f64) -> f64 {
        match self {
            Template::Sin2Pi => (2.0 * PI * t).sin(),
            Template::Cos2Pi => (2.0 * PI * t).cos(),
            Template::Sin4Pi => (4.0 * PI * t).sin(),
            Template::Cos4Pi => (4.0 * PI * t).cos(),
            Template::Bump => 16.0 * t * t * (1.0 - t) * (1.0 - t),
            Template::SinPi => (PI * t).sin(),
        }
    }

    pub fn second_derivative(self, t: f64) -> f64 {
        match self {
            Template::Sin2Pi => -4.0 * PI * PI * (2.0 * PI * t).sin(),
            Template::Cos2Pi => -4.0 * PI * PI * (2.0 * PI * t).cos(),
            Template::Sin4Pi => -16.0 * PI * PI * (4.0 * PI * t).sin(),
            Template::Cos4Pi => -16.0 * PI * PI * (4.0 * PI * t).cos(),
            Template::Bump => 16.0 * (2.0 - 12.0 * t + 12.0 * t * t),
            Template::SinPi => -PI * PI * (PI * t).sin(),
        }
    }

    /// `∫₀¹ g̃(t) dt`.
    pub fn mean(self) -> f64 {
        match self {
            Template::Sin2Pi | Template::Cos2Pi | Template::Sin4Pi | Template::Cos4Pi => 0.0,
            Template::Bump => 8.0 / 15.0,
            Template::SinPi => 2.0 / PI,
        }
    }
}

/// Ground truth of a scenario.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrueStructure {
    pub mu0: Vec<f64>,
    /// Shape and amplitude of `g_0k` for every varying covariate `k`.
    pub deviations: Vec<(usize, Template, f64)>,
    pub partition: StructuralPartition,
}

impl TrueStructure {
    pub fn p(&self) -> usize {
        self.mu0.len()
    }

    fn deviation(&self, k: usize) -> Option<(Template, f64)> {
        self.deviations.iter().find(|d| d.0 == k).map(|d| (d.1, d.2))
    }

    /// `g_0k(t) = a{g̃(t) − ∫g̃}`; zero for non-varying covariates.
    pub fn g0(&self, k: usize, t: f64) -> f64 {
        self.deviation(k).map_or(0.0, |(g, a)| a * (g.value(t) - g.mean()))
    }

    pub fn g0_second_derivative(&self, k: usize, t: f64) -> f64 {
        self.deviation(k).map_or(0.0, |(g, a)| a * g.second_derivative(t))
    }

    /// `β_0k(t) = μ_0k + g_0k(t)`.
    pub fn beta(&self, k: usize, t: f64) -> f64 {
        self.mu0[k] + self.g0(k, t)
    }
}

/// Varying covariates get shapes `g̃₁, g̃₂, …` in order; scenario F always
/// includes `g̃₆`, in the last varying slot when `s_v < 6`. Constant effects
/// are `+1` on the first half of the constant set and `−1` on the rest.
pub fn make_truth(spec: &ScenarioSpec) -> Result<TrueStructure> {
    spec.validate()?;
    let p = spec.p;
    let mut deviations: Vec<(usize, Template, f64)> = (0..spec.s_v)
        .map(|k| (k, Template::ALL[k], spec.amplitude))
        .collect();
    if spec.scenario == Scenario::F && spec.s_v > 0 && spec.s_v < TEMPLATE_COUNT {
        deviations[spec.s_v - 1].1 = Template::SinPi;
    }
    let mut mu0 = vec![0.0; p];
    let half = spec.s_c.div_ceil(2);
    for j in 0..spec.s_c {
        mu0[spec.s_v + j] = if j < half { 1.0 } else { -1.0 };
    }
    let labels: Vec<EffectClass> = (0..p)
        .map(|k| {
            if k < spec.s_v {
                EffectClass::Varying
            } else if k < spec.s_v + spec.s_c {
                EffectClass::Constant
            } else {
                EffectClass::Zero
            }
        })
        .collect();
    Ok(TrueStructure {
        mu0,
        deviations,
        partition: StructuralPartition::from_labels(&labels, 0.0),
    })
}

/// Draws a training dataset from `spec` using `spec.seed`.
pub fn generate(spec: &ScenarioSpec) -> Result<LongitudinalDataset> {
    let truth = make_truth(spec)?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    generate_subjects(spec, &truth, spec.n_subjects, &mut rng)
}

/// Draws `n_subjects` subjects from the data-generating process of `spec`.
pub fn generate_subjects(
    spec: &ScenarioSpec,
    truth: &TrueStructure,
    n_subjects: usize,
    rng: &mut impl Rng,
) -> Result<LongitudinalDataset> {
    spec.validate()?;
    let p = spec.p;
    let m = spec.n_obs;
    let innov = (1.0 - spec.rho * spec.rho).sqrt();
    let err_innov = (1.0 - spec.alpha * spec.alpha).sqrt();
    let sd_x = spec.sigma_x2.sqrt();
    let t_dist = match spec.error_model {
        ErrorModel::StudentT { nu } => Some((
            StudentT::new(nu).map_err(|e| Error::Config(format!("Student-t: {e}")))?,
            (((nu - 2.0) / nu).sqrt()),
        )),
        _ => None,
    };
    let mut subjects = Vec::with_capacity(n_subjects);
    for i in 0..n_subjects {
        // AR(1) recursion gives corr(x_k, x_ℓ) = ρ^|k−ℓ| with unit variances
        let mut base = Vec::with_capacity(p);
        let mut prev: f64 = rng.sample(StandardNormal);
        base.push(prev);
        for _ in 1..p {
            let e: f64 = rng.sample(StandardNormal);
            prev = spec.rho * prev + innov * e;
            base.push(prev);
        }
        let mut times: Vec<f64> = match spec.time_design {
            TimeDesign::Regular => {
                if m == 1 {
                    vec![0.5]
                } else {
                    (0..m).map(|j| j as f64 / (m - 1) as f64).collect()
                }
            }
            TimeDesign::Irregular => (0..m).map(|_| rng.gen::<f64>()).collect(),
        };
        times.sort_by(|a, b| a.total_cmp(b));
        let covariates: Vec<Vec<f64>> = (0..m)
            .map(|_| match spec.covariate_design {
                CovariateDesign::Baseline => base.clone(),
                CovariateDesign::TimeVarying => base
                    .iter()
                    .map(|&b| b + sd_x * rng.sample::<f64, _>(StandardNormal))
                    .collect(),
            })
            .collect();
        let mut prev_err = 0.0;
        let responses = (0..m)
            .map(|j| {
                let t = times[j];
                let eps = match spec.error_model {
                    ErrorModel::Gauss => spec.sigma * rng.sample::<f64, _>(StandardNormal),
                    ErrorModel::StudentT { .. } => {
                        let (dist, scale) = t_dist.as_ref().expect("t distribution built above");
                        spec.sigma * scale * dist.sample(rng)
                    }
                    ErrorModel::Heteroscedastic => {
                        spec.sigma * (1.0 + 0.5 * (2.0 * PI * t).sin()) * rng.sample::<f64, _>(StandardNormal)
                    }
                    ErrorModel::Ar1 => {
                        let e: f64 = rng.sample(StandardNormal);
                        prev_err = if j == 0 {
                            spec.sigma * e
                        } else {
                            spec.alpha * prev_err + spec.sigma * err_innov * e
                        };
                        prev_err
                    }
                };
                let signal: f64 = (0..p)
                    .filter(|&k| truth.mu0[k] != 0.0 || k < spec.s_v)
                    .map(|k| covariates[j][k] * truth.beta(k, t))
                    .sum();
                signal + eps
            })
            .collect();
        subjects.push(SubjectRecord {
            subject_id: format!("s{:05}", i + 1),
            times,
            responses,
            covariates,
        });
    }
    let names = (1..=p).map(|k| format!("x{k}")).collect();
    LongitudinalDataset::new(subjects, names)
}

/// Metrics of one fitted method on one replication.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReplicationMetrics {
    pub ise: f64,
    pub mse_mu: f64,
    pub mse_mu_act: f64,
    pub re: f64,
    pub tpr_vary: f64,
    pub fpr_vary: f64,
    pub class_acc: f64,
    pub mspe: f64,
    pub selected: BTreeSet<usize>,
    pub partition: StructuralPartition,
}

/// Coefficients of a fit on standardized covariates expressed on the
/// original covariate scale (`μ̂_k/s_k`, `θ̂_k/s_k`).
fn original_scale(fit: &ModelFit, scalings: &[ColumnScaling]) -> (Vec<f64>, Vec<nalgebra::DVector<f64>>) {
    let mu = (0..fit.p()).map(|k| fit.mu[k] / scalings[k].scale).collect();
    let theta = (0..fit.p()).map(|k| &fit.theta[k] / scalings[k].scale).collect();
    (mu, theta)
}

/// Equally spaced grid of `size` points on `[0, 1]`.
pub fn unit_grid(size: usize) -> Vec<f64> {
    match size {
        0 => Vec::new(),
        1 => vec![0.5],
        _ => (0..size).map(|g| g as f64 / (size - 1) as f64).collect(),
    }
}

/// Scores a fit against the truth. `scalings` are the training
/// standardization (identity when the fit used raw covariates);
/// `test` must already be on the fit's covariate scale; `n_train` is the
/// number of training observations (enters `τ_N`).
pub fn score_fit(
    fit: &ModelFit,
    truth: &TrueStructure,
    scalings: &[ColumnScaling],
    test: &LongitudinalDataset,
    n_train: usize,
    grid_size: usize,
) -> Result<ReplicationMetrics> {
    let p = truth.p();
    if fit.p() != p || scalings.len() != p {
        return Err(Error::DimensionMismatch {
            what: "covariates in fit and truth",
            expected: p,
            got: fit.p(),
        });
    }
    let basis = &fit.basis;
    let (mu, theta) = original_scale(fit, scalings);

    let grid = unit_grid(grid_size);
    let rows: Vec<nalgebra::DVector<f64>> = grid.iter().map(|&t| basis.eval_centered(t)).collect::<Result<_>>()?;
    let mut ise = 0.0;
    for k in 0..p {
        let mut acc = 0.0;
        for (t, b) in grid.iter().zip(&rows) {
            let d = mu[k] + b.dot(&theta[k]) - truth.beta(k, *t);
            acc += d * d;
        }
        ise += acc / grid.len() as f64;
    }
    ise /= p as f64;

    let mse_mu = (0..p).map(|k| (mu[k] - truth.mu0[k]).powi(2)).sum::<f64>() / p as f64;
    let s_const = &truth.partition.s_const;
    let mse_mu_act = if s_const.is_empty() {
        0.0
    } else {
        s_const.iter().map(|&k| (mu[k] - truth.mu0[k]).powi(2)).sum::<f64>() / s_const.len() as f64
    };

    let s_vary = &truth.partition.s_vary;
    let re = if s_vary.is_empty() {
        0.0
    } else {
        let nodes = composite_gauss_legendre(4, 250, 0.0, 1.0);
        let mut total = 0.0;
        for &k in s_vary {
            for &(t, w) in &nodes {
                let d = basis.curve_second_derivative(&theta[k], t)? - truth.g0_second_derivative(k, t);
                total += w * d * d;
            }
        }
        total / s_vary.len() as f64
    };

    let selected = select_vary(fit);
    let hits = selected.intersection(s_vary).count();
    let tpr_vary = if s_vary.is_empty() { 1.0 } else { hits as f64 / s_vary.len() as f64 };
    let negatives = p - s_vary.len();
    let fpr_vary = if negatives == 0 {
        0.0
    } else {
        (selected.len() - hits) as f64 / negatives as f64
    };

    let partition = classify(fit, n_train, p, 1.0)?;
    let class_acc = partition
        .labels()
        .iter()
        .zip(truth.partition.labels())
        .filter(|(a, b)| **a == *b)
        .count() as f64
        / p as f64;

    let test_design = test.build_design(basis)?;
    let mspe = fit.rss(&test_design) / test_design.n() as f64;

    Ok(ReplicationMetrics {
        ise,
        mse_mu,
        mse_mu_act,
        re,
        tpr_vary,
        fpr_vary,
        class_acc,
        mspe,
        selected,
        partition,
    })
}

/// Mean pairwise Jaccard index of the selected sets. A pair of empty sets
/// counts as 1.
pub fn stability(selected_sets: &[BTreeSet<usize>]) -> Result<f64> {
    let r = selected_sets.len();
    if r < 2 {
        return Err(Error::Config(format!("stability needs at least 2 replications, got {r}")));
    }
    let mut total = 0.0;
    for a in 0..r {
        for b in a + 1..r {
            let (sa, sb) = (&selected_sets[a], &selected_sets[b]);
            let union = sa.union(sb).count();
            total += if union == 0 {
                1.0
            } else {
                sa.intersection(sb).count() as f64 / union as f64
            };
        }
    }
    Ok(total * 2.0 / (r * (r - 1)) as f64)
}

/// SplitMix64 finalizer, used to derive independent child seeds.
fn mix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// What a derived random stream is used for.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StreamPurpose {
    Train,
    Test,
}

/// Seed of replication `r` of `spec` within a study seeded by `seed`.
/// Depends only on its arguments, so adding replications leaves earlier ones
/// unchanged.
pub fn child_seed(seed: u64, spec: &ScenarioSpec, r: usize, purpose: StreamPurpose) -> u64 {
    let parts = [
        spec.scenario.index(),
        spec.n_subjects as u64,
        spec.n_obs as u64,
        spec.p as u64,
        r as u64,
        purpose as u64,
    ];
    parts.iter().fold(mix(seed), |acc, &v| mix(acc ^ mix(v)))
}

/// Everything a study needs besides the scenarios.
#[derive(Debug, Clone, PartialEq)]
pub struct StudyOptions {
    pub replications: usize,
    pub seed: u64,
    pub methods: Vec<Method>,
    pub n_test: usize,
    pub solver: SolverOptions,
    pub gamma: f64,
    /// Override the default penalty grid (anchored at `λ₁,max` per
    /// replication) with fixed axes.
    pub grid: Option<TuningGrid>,
    /// Keep fitted and true curves of every replication.
    pub keep_curves: bool,
}

impl Default for StudyOptions {
    fn default() -> Self {
        Self {
            replications: 30,
            seed: 1,
            methods: Method::ALL.to_vec(),
            n_test: DEFAULT_TEST_SUBJECTS,
            solver: SolverOptions::default(),
            gamma: DEFAULT_GAMMA,
            grid: None,
            keep_curves: false,
        }
    }
}

/// Fitted and true `β_k(t)` of one method on one replication.
#[derive(Debug, Clone, PartialEq)]
pub struct CurveGrid {
    pub scenario: Scenario,
    pub config: String,
    pub method: Method,
    pub replication: usize,
    pub times: Vec<f64>,
    /// `beta_hat[k][g]` on the original covariate scale.
    pub beta_hat: Vec<Vec<f64>>,
    pub beta_true: Vec<Vec<f64>>,
}

impl CurveGrid {
    /// `k,t,beta_true,beta_hat` with 1-based `k`.
    pub fn write_csv(&self, mut out: impl Write) -> std::io::Result<()> {
        writeln!(out, "k,t,beta_true,beta_hat")?;
        for k in 0..self.beta_hat.len() {
            for (g, t) in self.times.iter().enumerate() {
                writeln!(
                    out,
                    "{},{},{},{}",
                    k + 1,
                    fmt_f64(*t),
                    fmt_f64(self.beta_true[k][g]),
                    fmt_f64(self.beta_hat[k][g])
                )?;
            }
        }
        Ok(())
    }
}

/// Outcome of every method on one replication.
#[derive(Debug, Clone)]
pub struct ReplicationOutcome {
    pub replication: usize,
    /// Per-method metrics, or the error message of a failed fit.
    pub results: Vec<(Method, std::result::Result<ReplicationMetrics, String>)>,
    pub curves: Vec<CurveGrid>,
    pub selected_penalties: Vec<(Method, f64, f64)>,
}

/// Generates one replication's training and test data, tunes every method
/// by EBIC on the identical training data and scores it.
pub fn run_replication(spec: &ScenarioSpec, r: usize, options: &StudyOptions) -> Result<ReplicationOutcome> {
    let truth = make_truth(spec)?;
    let mut train_rng = ChaCha8Rng::seed_from_u64(child_seed(options.seed, spec, r, StreamPurpose::Train));
    let mut test_rng = ChaCha8Rng::seed_from_u64(child_seed(options.seed, spec, r, StreamPurpose::Test));
    let raw_train = generate_subjects(spec, &truth, spec.n_subjects, &mut train_rng)?;
    let raw_test = generate_subjects(spec, &truth, options.n_test, &mut test_rng)?;
    let train = raw_train.standardize(&[])?;
    let scalings = train
        .preprocessing()
        .standardization
        .clone()
        .expect("standardize records its scaling");
    let test = raw_test.apply_scaling(&scalings);
    let basis = CenteredSplineBasis::build(SplineConfig::cubic(spec.q)?, &train.all_times())?;
    let design = train.build_design(&basis)?;
    let grid = match &options.grid {
        Some(g) => g.clone(),
        None => {
            let mut g = TuningGrid::default_for(&design)?;
            g.gamma = options.gamma;
            g
        }
    };
    let tuning = TuningOptions {
        solver: options.solver,
        warm_start: true,
    };
    let n_train = design.n();
    let mut results = Vec::new();
    let mut curves = Vec::new();
    let mut penalties = Vec::new();
    for &method in &options.methods {
        let scored = tune_method_ebic(&design, &basis, method, &grid, &tuning).and_then(|res| {
            penalties.push((method, res.best_lambda1, res.best_lambda2));
            let metrics = score_fit(&res.best_fit, &truth, &scalings, &test, n_train, CURVE_GRID_SIZE)?;
            if options.keep_curves {
                curves.push(curve_grid(&res.best_fit, &truth, &scalings, spec, method, r)?);
            }
            Ok(metrics)
        });
        results.push((method, scored.map_err(|e| e.to_string())));
    }
    Ok(ReplicationOutcome {
        replication: r,
        results,
        curves,
        selected_penalties: penalties,
    })
}

fn curve_grid(
    fit: &ModelFit,
    truth: &TrueStructure,
    scalings: &[ColumnScaling],
    spec: &ScenarioSpec,
    method: Method,
    r: usize,
) -> Result<CurveGrid> {
    let times = unit_grid(CURVE_GRID_SIZE);
    let (mu, theta) = original_scale(fit, scalings);
    let mut beta_hat = Vec::with_capacity(fit.p());
    let mut beta_true = Vec::with_capacity(fit.p());
    for k in 0..fit.p() {
        beta_hat.push(
            times
                .iter()
                .map(|&t| Ok(mu[k] + fit.basis.curve(&theta[k], t)?))
                .collect::<Result<Vec<_>>>()?,
        );
        beta_true.push(times.iter().map(|&t| truth.beta(k, t)).collect());
    }
    Ok(CurveGrid {
        scenario: spec.scenario,
        config: spec.config_label(),
        method,
        replication: r,
        times,
        beta_hat,
        beta_true,
    })
}

/// Monte Carlo mean and standard error (absent for a single value).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MetricSummary {
    pub mean: f64,
    pub se: Option<f64>,
}

impl MetricSummary {
    pub fn of(values: &[f64]) -> Self {
        let r = values.len();
        if r == 0 {
            return Self { mean: f64::NAN, se: None };
        }
        let mean = values.iter().sum::<f64>() / r as f64;
        let se = (r > 1).then(|| {
            let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (r - 1) as f64;
            (var / r as f64).sqrt()
        });
        Self { mean, se }
    }
}

/// Aggregated metrics of one method on one scenario configuration.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub scenario: Scenario,
    pub config: String,
    pub method: Method,
    pub replications: usize,
    pub failures: usize,
    pub ise: MetricSummary,
    pub mse_mu: MetricSummary,
    pub mse_mu_act: MetricSummary,
    pub re: MetricSummary,
    pub tpr_vary: MetricSummary,
    pub fpr_vary: MetricSummary,
    pub class_acc: MetricSummary,
    /// Absent when fewer than two replications succeeded.
    pub stab: Option<f64>,
    pub mspe: MetricSummary,
}

impl MetricsReport {
    pub fn from_replications(
        spec: &ScenarioSpec,
        method: Method,
        metrics: &[ReplicationMetrics],
        failures: usize,
    ) -> Self {
        let col = |f: fn(&ReplicationMetrics) -> f64| MetricSummary::of(&metrics.iter().map(f).collect::<Vec<_>>());
        let sets: Vec<BTreeSet<usize>> = metrics.iter().map(|m| m.selected.clone()).collect();
        Self {
            scenario: spec.scenario,
            config: spec.config_label(),
            method,
            replications: metrics.len(),
            failures,
            ise: col(|m| m.ise),
            mse_mu: col(|m| m.mse_mu),
            mse_mu_act: col(|m| m.mse_mu_act),
            re: col(|m| m.re),
            tpr_vary: col(|m| m.tpr_vary),
            fpr_vary: col(|m| m.fpr_vary),
            class_acc: col(|m| m.class_acc),
            stab: stability(&sets).ok(),
            mspe: col(|m| m.mspe),
        }
    }

    /// `(name, summary)` pairs in table order.
    pub fn metrics(&self) -> Vec<(&'static str, MetricSummary)> {
        let mut v = vec![
            ("ISE", self.ise),
            ("MSE_mu", self.mse_mu),
            ("MSE_mu_act", self.mse_mu_act),
            ("RE", self.re),
            ("TPR_vary", self.tpr_vary),
            ("FPR_vary", self.fpr_vary),
            ("ClassAcc", self.class_acc),
        ];
        if let Some(s) = self.stab {
            v.push(("Stab", MetricSummary { mean: s, se: None }));
        }
        v.push(("MSPE", self.mspe));
        v
    }
}

/// Result of [`run_study`]: one report per (scenario, method) plus optional
/// curve grids.
#[derive(Debug, Clone)]
pub struct StudyResult {
    pub reports: Vec<MetricsReport>,
    pub curves: Vec<CurveGrid>,
    pub failures: Vec<String>,
}

impl StudyResult {
    pub fn report(&self, scenario: Scenario, method: Method) -> Option<&MetricsReport> {
        self.reports.iter().find(|r| r.scenario == scenario && r.method == method)
    }

    /// Long table `scenario,config,method,metric,mean,se`; `se` is empty
    /// when absent.
    pub fn write_csv(&self, mut out: impl Write) -> std::io::Result<()> {
        writeln!(out, "scenario,config,method,metric,mean,se")?;
        for r in &self.reports {
            for (name, s) in r.metrics() {
                writeln!(
                    out,
                    "{},\"{}\",{},{},{},{}",
                    r.scenario,
                    r.config,
                    r.method.label(),
                    name,
                    fmt_f64(s.mean),
                    s.se.map(fmt_f64).unwrap_or_default()
                )?;
            }
        }
        Ok(())
    }

    pub fn save_csv(&self, path: &Path) -> Result<()> {
        let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        let mut w = std::io::BufWriter::new(file);
        self.write_csv(&mut w)
            .and_then(|_| w.flush())
            .map_err(|e| Error::io(path, e))
    }

    /// Human-readable table in the layout of a simulation results table.
    pub fn summary_table(&self) -> String {
        let mut s = format!(
            "{:<4} {:<14} {:<14} {:>10} {:>10} {:>10} {:>10} {:>8} {:>8} {:>8}\n",
            "scen", "config", "method", "MSE_mu", "MSE_act", "MSPE", "RE", "TPR", "FPR", "ClassAcc"
        );
        for r in &self.reports {
            s.push_str(&format!(
                "{:<4} {:<14} {:<14} {:>10.4} {:>10.4} {:>10.4} {:>10.4} {:>8.3} {:>8.3} {:>8.3}\n",
                r.scenario.to_string(),
                r.config,
                r.method.label(),
                r.mse_mu.mean,
                r.mse_mu_act.mean,
                r.mspe.mean,
                r.re.mean,
                r.tpr_vary.mean,
                r.fpr_vary.mean,
                r.class_acc.mean
            ));
        }
        s
    }
}

/// Runs `options.replications` replications of every spec, in parallel over
/// replications. Output does not depend on the number of threads.
pub fn run_study(specs: &[ScenarioSpec], options: &StudyOptions) -> Result<StudyResult> {
    if options.replications == 0 {
        return Err(Error::Config("a study needs at least one replication".into()));
    }
    if options.methods.is_empty() {
        return Err(Error::Config("a study needs at least one method".into()));
    }
    for spec in specs {
        spec.validate()?;
    }
    let jobs: Vec<(usize, usize)> = (0..specs.len())
        .flat_map(|s| (0..options.replications).map(move |r| (s, r)))
        .collect();
    let outcomes: Vec<Result<ReplicationOutcome>> = jobs
        .par_iter()
        .map(|&(s, r)| run_replication(&specs[s], r, options))
        .collect();

    let mut reports = Vec::new();
    let mut curves = Vec::new();
    let mut failures = Vec::new();
    for (s, spec) in specs.iter().enumerate() {
        let mine: Vec<&Result<ReplicationOutcome>> = jobs
            .iter()
            .zip(&outcomes)
            .filter(|((js, _), _)| *js == s)
            .map(|(_, o)| o)
            .collect();
        for &method in &options.methods {
            let mut ok = Vec::new();
            let mut failed = 0;
            for (r, outcome) in mine.iter().enumerate() {
                let res = match outcome {
                    Ok(o) => o
                        .results
                        .iter()
                        .find(|(m, _)| *m == method)
                        .map(|(_, res)| res.as_ref().map_err(|e| e.clone())),
                    Err(e) => Some(Err(e.to_string())),
                };
                match res {
                    Some(Ok(m)) => ok.push(m.clone()),
                    Some(Err(msg)) => {
                        failed += 1;
                        failures.push(format!("scenario {} {} {} replication {r}: {msg}", spec.scenario, spec.config_label(), method));
                    }
                    None => {}
                }
            }
            if failed as f64 > MAX_FAILURE_FRACTION * options.replications as f64 {
                return Err(Error::Study(format!(
                    "{failed} of {} replications failed for {} in scenario {} {}",
                    options.replications,
                    method,
                    spec.scenario,
                    spec.config_label()
                )));
            }
            reports.push(MetricsReport::from_replications(spec, method, &ok, failed));
        }
        for o in mine.iter().filter_map(|o| o.as_ref().ok()) {
            curves.extend(o.curves.iter().cloned());
        }
    }
    Ok(StudyResult {
        reports,
        curves,
        failures,
    })
}

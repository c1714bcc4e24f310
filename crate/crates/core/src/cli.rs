//! Command-line driver: `fit`, `tune`, `predict`, `classify` and `simulate`.
//!
//! Every option can be given as a flag or as a key in a TOML file passed
//! with `--config`; the file wins when both are present. Each command
//! writes `config.toml` into its output directory holding the fully
//! resolved settings, so `tvselect <command> --config <out>/config.toml`
//! repeats the run.
//!
//! Exit codes: 0 on success, 1 on numerical failure, 2 on usage or IO
//! errors.

use std::ffi::OsString;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::artifact::{fmt_f64, write_predictions_csv, FitArtifact};
use crate::basis::{CenteredSplineBasis, KnotPlacement, SplineConfig};
use crate::data::{dataset_from_table, read_long_csv, DesignBlocks, LongitudinalDataset};
use crate::error::{Error, Result};
use crate::simulate::{
    run_study, unit_grid, CovariateDesign, ErrorModel, Scenario, ScenarioSpec, StudyOptions, TimeDesign,
    CURVE_GRID_SIZE,
};
use crate::solver::{fit_method, BlockUpdate, Damping, Method, ModelFit, PenaltyConfig, SolverOptions};
use crate::structure::{classify, EffectClass, StructuralPartition};
use crate::tuning::{
    lambda1_max, log_spaced, tune_method_cv, tune_method_ebic, Criterion, TuningGrid, TuningOptions,
    DEFAULT_GAMMA, DEFAULT_LAMBDA1_RATIO, DEFAULT_LAMBDA2_RANGE, DEFAULT_NUM_LAMBDA1, DEFAULT_NUM_LAMBDA2,
};

#[derive(Debug, Parser)]
#[command(name = "tvselect", version, about = "Zero / constant / time-varying effect selection for longitudinal data")]
pub struct Cli {
    /// Worker threads for grid and replication loops (default: all cores).
    #[arg(long, global = true)]
    pub threads: Option<usize>,

    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Fit one model at a fixed penalty pair.
    Fit(FitArgs),
    /// Select the penalty pair by EBIC or subject-wise cross-validation.
    Tune(TuneArgs),
    /// Predict new long-format rows from a saved fit.
    Predict(PredictArgs),
    /// Re-classify a saved fit with a different threshold multiplier.
    Classify(ClassifyArgs),
    /// Run a replicated simulation study.
    Simulate(SimulateArgs),
}

/// Data, basis and solver settings shared by `fit` and `tune`.
#[derive(Debug, Clone, Default, Args, Serialize, Deserialize)]
pub struct ModelArgs {
    /// Long-format CSV with columns subject,time,y,x1..xp.
    #[arg(long)]
    pub data: Option<PathBuf>,
    /// Output directory.
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// tv-select, vc-ridge, group-lasso or screen-refit.
    #[arg(long)]
    pub method: Option<String>,
    /// Number of basis functions.
    #[arg(long)]
    pub q: Option<usize>,
    #[arg(long)]
    pub degree: Option<usize>,
    /// Interior knot placement: equal or quantile.
    #[arg(long)]
    pub knots: Option<String>,
    /// Subtract subject means before fitting (true/false).
    #[arg(long)]
    pub demean: Option<bool>,
    /// Covariates left unstandardized (comma separated names).
    #[arg(long, value_delimiter = ',')]
    pub binary: Option<Vec<String>>,
    #[arg(long)]
    pub tol: Option<f64>,
    #[arg(long)]
    pub max_iter: Option<usize>,
    /// exact or smooth-then-threshold.
    #[arg(long)]
    pub block_update: Option<String>,
    /// halving or none.
    #[arg(long)]
    pub damping: Option<String>,
    /// Multiplier c in the constant-effect threshold c·sqrt(log p / n).
    #[arg(long)]
    pub threshold_multiplier: Option<f64>,
}

#[derive(Debug, Clone, Default, Args, Serialize, Deserialize)]
pub struct FitArgs {
    /// TOML file with any of the options below.
    #[arg(long)]
    #[serde(skip)]
    pub config: Option<PathBuf>,
    #[command(flatten)]
    #[serde(flatten)]
    pub model: ModelArgs,
    #[arg(long)]
    pub lambda1: Option<f64>,
    #[arg(long)]
    pub lambda2: Option<f64>,
}

#[derive(Debug, Clone, Default, Args, Serialize, Deserialize)]
pub struct TuneArgs {
    #[arg(long)]
    #[serde(skip)]
    pub config: Option<PathBuf>,
    #[command(flatten)]
    #[serde(flatten)]
    pub model: ModelArgs,
    /// ebic or cv.
    #[arg(long)]
    pub criterion: Option<String>,
    #[arg(long)]
    pub folds: Option<usize>,
    /// Seed for the fold assignment.
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub gamma: Option<f64>,
    #[arg(long)]
    pub n_lambda1: Option<usize>,
    /// Smallest λ1 as a fraction of λ1,max.
    #[arg(long)]
    pub lambda1_ratio: Option<f64>,
    #[arg(long)]
    pub lambda2_min: Option<f64>,
    #[arg(long)]
    pub lambda2_max: Option<f64>,
    #[arg(long)]
    pub n_lambda2: Option<usize>,
    /// Explicit λ1 axis (overrides the log-spaced default).
    #[arg(long, value_delimiter = ',')]
    pub lambda1_values: Option<Vec<f64>>,
    /// Explicit λ2 axis.
    #[arg(long, value_delimiter = ',')]
    pub lambda2_values: Option<Vec<f64>>,
    /// Fit every grid point from scratch instead of along a warm-started path.
    #[arg(long)]
    pub cold_start: Option<bool>,
}

#[derive(Debug, Clone, Default, Args, Serialize, Deserialize)]
pub struct PredictArgs {
    #[arg(long)]
    #[serde(skip)]
    pub config: Option<PathBuf>,
    /// Fit artifact (fit.json).
    #[arg(long)]
    pub fit: Option<PathBuf>,
    /// Long-format CSV; the y column is optional.
    #[arg(long)]
    pub data: Option<PathBuf>,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Clone, Default, Args, Serialize, Deserialize)]
pub struct ClassifyArgs {
    #[arg(long)]
    #[serde(skip)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub fit: Option<PathBuf>,
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long)]
    pub threshold_multiplier: Option<f64>,
}

#[derive(Debug, Clone, Default, Args, Serialize, Deserialize)]
pub struct SimulateArgs {
    #[arg(long)]
    #[serde(skip)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Scenario A to F.
    #[arg(long)]
    pub scenario: Option<String>,
    #[arg(long)]
    pub n_subjects: Option<usize>,
    #[arg(long)]
    pub n_obs: Option<usize>,
    #[arg(long)]
    pub p: Option<usize>,
    #[arg(long)]
    pub s_v: Option<usize>,
    #[arg(long)]
    pub s_c: Option<usize>,
    #[arg(long)]
    pub q: Option<usize>,
    #[arg(long)]
    pub rho: Option<f64>,
    #[arg(long)]
    pub alpha: Option<f64>,
    #[arg(long)]
    pub sigma: Option<f64>,
    #[arg(long)]
    pub sigma_x2: Option<f64>,
    #[arg(long)]
    pub amplitude: Option<f64>,
    /// gauss, t, heteroscedastic or ar1.
    #[arg(long)]
    pub error_model: Option<String>,
    /// Degrees of freedom for t errors.
    #[arg(long)]
    pub nu: Option<f64>,
    /// regular or irregular.
    #[arg(long)]
    pub time_design: Option<String>,
    /// baseline or time-varying.
    #[arg(long)]
    pub covariate_design: Option<String>,
    #[arg(long)]
    pub replications: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Comma separated methods (default: all four).
    #[arg(long, value_delimiter = ',')]
    pub methods: Option<Vec<String>>,
    /// Test subjects per replication for MSPE.
    #[arg(long)]
    pub n_test: Option<usize>,
    #[arg(long)]
    pub gamma: Option<f64>,
    #[arg(long)]
    pub tol: Option<f64>,
    #[arg(long)]
    pub max_iter: Option<usize>,
    /// Fixed λ1 axis for every replication (needs lambda2_values too).
    #[arg(long, value_delimiter = ',')]
    pub lambda1_values: Option<Vec<f64>>,
    #[arg(long, value_delimiter = ',')]
    pub lambda2_values: Option<Vec<f64>>,
    /// Write per-replication curve grids.
    #[arg(long)]
    pub curves: Option<bool>,
}

/// Parses `args`, runs the command and returns the process exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 2 } else { 0 };
        }
    };
    match execute(cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            exit_code(&e)
        }
    }
}

pub fn exit_code(e: &Error) -> i32 {
    if e.is_numerical() {
        1
    } else {
        2
    }
}

/// Runs a parsed command, inside a dedicated thread pool when `--threads`
/// is given.
pub fn execute(cli: Cli) -> Result<()> {
    let Cli { threads, command } = cli;
    match threads {
        Some(0) => Err(Error::Config("--threads must be at least 1".into())),
        Some(n) => {
            let pool = rayon::ThreadPoolBuilder::new()
                .num_threads(n)
                .build()
                .map_err(|e| Error::Config(format!("cannot start thread pool: {e}")))?;
            pool.install(|| dispatch(command))
        }
        None => dispatch(command),
    }
}

fn dispatch(command: Command) -> Result<()> {
    match command {
        Command::Fit(a) => cmd_fit(a),
        Command::Tune(a) => cmd_tune(a),
        Command::Predict(a) => cmd_predict(a),
        Command::Classify(a) => cmd_classify(a),
        Command::Simulate(a) => cmd_simulate(a),
    }
}

fn warn(msg: &str) {
    eprintln!("warning: {msg}");
}

/// Overlays the keys of a TOML config file on the flag values. Keys present
/// in both with different values produce a warning; unknown keys are an
/// error.
fn merge_config<T: Serialize + DeserializeOwned>(flags: T, config: Option<&Path>, command: &str) -> Result<T> {
    let Some(path) = config else {
        return Ok(flags);
    };
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let file: toml::Table = text
        .parse()
        .map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
    let ser = |e: toml::ser::Error| Error::Serialization(e.to_string());
    let mut merged = toml::Table::try_from(&flags).map_err(ser)?;
    for (key, value) in file {
        if key == "command" {
            if value.as_str() != Some(command) {
                return Err(Error::Config(format!(
                    "{}: written for command `{value}`, not `{command}`",
                    path.display()
                )));
            }
            continue;
        }
        if let Some(old) = merged.get(&key) {
            if old != &value {
                warn(&format!("`{key}` from {} overrides the command-line value", path.display()));
            }
        }
        merged.insert(key, value);
    }
    let out: T = merged
        .clone()
        .try_into()
        .map_err(|e: toml::de::Error| Error::Config(format!("{}: {e}", path.display())))?;
    let known = toml::Table::try_from(&out).map_err(ser)?;
    if let Some(key) = merged.keys().find(|k| !known.contains_key(*k)) {
        return Err(Error::Config(format!("{}: unknown key `{key}`", path.display())));
    }
    Ok(out)
}

fn write_echo<T: Serialize>(resolved: &T, dir: &Path, command: &str) -> Result<()> {
    let mut table = toml::Table::new();
    table.insert("command".into(), toml::Value::String(command.into()));
    let body = toml::Table::try_from(resolved).map_err(|e| Error::Serialization(e.to_string()))?;
    table.extend(body);
    let text = toml::to_string(&table).map_err(|e| Error::Serialization(e.to_string()))?;
    write_text(&dir.join("config.toml"), &text)
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn create_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

fn required<T: Clone>(value: &Option<T>, name: &str) -> Result<T> {
    value
        .clone()
        .ok_or_else(|| Error::Config(format!("missing required option `{name}` (flag --{})", name.replace('_', "-"))))
}

fn require_file(path: &Path) -> Result<()> {
    if path.is_file() {
        Ok(())
    } else {
        Err(Error::io(
            path,
            std::io::Error::new(std::io::ErrorKind::NotFound, "input file not found"),
        ))
    }
}

fn norm(s: &str) -> String {
    s.chars()
        .filter(|c| c.is_ascii_alphanumeric())
        .collect::<String>()
        .to_ascii_lowercase()
}

fn parse_knots(s: &str) -> Result<KnotPlacement> {
    match norm(s).as_str() {
        "equal" | "equallyspaced" => Ok(KnotPlacement::EquallySpaced),
        "quantile" | "quantiles" | "timequantiles" => Ok(KnotPlacement::TimeQuantiles),
        _ => Err(Error::Config(format!("unknown knot placement `{s}` (equal, quantile)"))),
    }
}

fn parse_block_update(s: &str) -> Result<BlockUpdate> {
    match norm(s).as_str() {
        "exact" => Ok(BlockUpdate::Exact),
        "smooththenthreshold" => Ok(BlockUpdate::SmoothThenThreshold),
        _ => Err(Error::Config(format!(
            "unknown block update `{s}` (exact, smooth-then-threshold)"
        ))),
    }
}

fn parse_damping(s: &str) -> Result<Damping> {
    match norm(s).as_str() {
        "halving" => Ok(Damping::Halving),
        "none" => Ok(Damping::None),
        _ => Err(Error::Config(format!("unknown damping `{s}` (halving, none)"))),
    }
}

fn method_key(m: Method) -> &'static str {
    match m {
        Method::TvSelect => "tv-select",
        Method::VcRidge => "vc-ridge",
        Method::GroupLasso => "group-lasso",
        Method::ScreenRefit => "screen-refit",
    }
}

/// Resolved data and solver settings.
#[derive(Debug, Clone)]
pub struct ModelSettings {
    pub data: PathBuf,
    pub out: PathBuf,
    pub method: Method,
    pub spline: SplineConfig,
    pub demean: bool,
    pub binary: Vec<String>,
    pub solver: SolverOptions,
    pub threshold_multiplier: f64,
}

impl ModelArgs {
    /// Fills defaults in place and returns the typed settings.
    fn resolve(&mut self) -> Result<ModelSettings> {
        let data = required(&self.data, "data")?;
        let out = required(&self.out, "out")?;
        let method: Method = self.method.get_or_insert_with(|| "tv-select".into()).parse()?;
        self.method = Some(method_key(method).into());
        let degree = *self.degree.get_or_insert(3);
        let q = *self.q.get_or_insert(8);
        if q < degree + 1 {
            return Err(Error::Config(format!("q = {q} is too small for degree {degree}")));
        }
        let placement = parse_knots(self.knots.get_or_insert_with(|| "equal".into()))?;
        self.knots = Some(
            match placement {
                KnotPlacement::EquallySpaced => "equal",
                KnotPlacement::TimeQuantiles => "quantile",
            }
            .into(),
        );
        let spline = SplineConfig::new(degree, q - degree - 1, placement);
        spline.validate()?;
        let defaults = SolverOptions::default();
        let block_update = parse_block_update(self.block_update.get_or_insert_with(|| "exact".into()))?;
        self.block_update = Some(
            match block_update {
                BlockUpdate::Exact => "exact",
                BlockUpdate::SmoothThenThreshold => "smooth-then-threshold",
            }
            .into(),
        );
        let damping = parse_damping(self.damping.get_or_insert_with(|| "halving".into()))?;
        self.damping = Some(
            match damping {
                Damping::Halving => "halving",
                Damping::None => "none",
            }
            .into(),
        );
        let demean = *self.demean.get_or_insert(true);
        let solver = SolverOptions {
            tol: *self.tol.get_or_insert(defaults.tol),
            max_iter: *self.max_iter.get_or_insert(defaults.max_iter),
            damping,
            intercept: !demean,
            block_update,
        };
        solver.validate()?;
        let threshold_multiplier = *self.threshold_multiplier.get_or_insert(1.0);
        if !(threshold_multiplier >= 0.0) {
            return Err(Error::Config("threshold_multiplier must be non-negative".into()));
        }
        Ok(ModelSettings {
            data,
            out,
            method,
            spline,
            demean,
            binary: self.binary.get_or_insert_with(Vec::new).clone(),
            solver,
            threshold_multiplier,
        })
    }
}

/// A dataset after time rescaling, standardization and optional de-meaning,
/// with its basis and design.
#[derive(Debug, Clone)]
pub struct PreparedData {
    pub dataset: LongitudinalDataset,
    pub basis: CenteredSplineBasis,
    pub design: DesignBlocks,
}

/// Loads a long-format CSV and applies the standard preprocessing:
/// covariates are standardized (except `binary`) and then, if `demean`,
/// de-meaned within subject.
pub fn prepare_data(path: &Path, spline: SplineConfig, demean: bool, binary: &[String]) -> Result<PreparedData> {
    require_file(path)?;
    let table = read_long_csv(path, true)?;
    let raw = dataset_from_table(&table, None)?;
    let mut exempt = Vec::with_capacity(binary.len());
    for name in binary {
        let k = raw
            .covariate_names()
            .iter()
            .position(|c| c == name)
            .ok_or_else(|| Error::Config(format!("binary covariate `{name}` is not a column of the data")))?;
        exempt.push(k);
    }
    let scaled = raw.standardize(&exempt)?;
    let dataset = if demean { scaled.demean_within_subject() } else { scaled };
    let basis = CenteredSplineBasis::build(spline, &dataset.all_times())?;
    let design = dataset.build_design(&basis)?;
    Ok(PreparedData { dataset, basis, design })
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CovariateReport {
    pub name: String,
    pub class: EffectClass,
    /// `μ̂_k` on the standardized scale used for classification.
    pub mu_hat: f64,
    /// `μ̂_k` per unit of the original covariate.
    pub mu_hat_original: f64,
    pub theta_norm: f64,
}

/// Structural partition in a readable form, written as `partition.json`.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PartitionReport {
    pub method: Method,
    pub lambda1: f64,
    pub lambda2: f64,
    pub n_observations: usize,
    pub p: usize,
    pub threshold_multiplier: f64,
    pub threshold_used: f64,
    pub time_varying: Vec<String>,
    pub constant: Vec<String>,
    pub zero: Vec<String>,
    pub covariates: Vec<CovariateReport>,
}

impl PartitionReport {
    pub fn new(artifact: &FitArtifact, partition: &StructuralPartition, multiplier: f64) -> Self {
        let names = &artifact.covariate_names;
        let pick = |set: &std::collections::BTreeSet<usize>| set.iter().map(|&k| names[k].clone()).collect();
        let scale = |k: usize| {
            artifact
                .preprocessing
                .standardization
                .as_ref()
                .map_or(1.0, |s| s[k].scale)
        };
        let covariates = (0..artifact.p())
            .map(|k| CovariateReport {
                name: names[k].clone(),
                class: partition.class_of(k).expect("partition covers every covariate"),
                mu_hat: artifact.mu[k],
                mu_hat_original: artifact.mu[k] / scale(k),
                theta_norm: artifact.theta[k].iter().map(|v| v * v).sum::<f64>().sqrt(),
            })
            .collect();
        Self {
            method: artifact.method,
            lambda1: artifact.penalty.lambda1,
            lambda2: artifact.penalty.lambda2,
            n_observations: artifact.n_observations,
            p: artifact.p(),
            threshold_multiplier: multiplier,
            threshold_used: partition.threshold_used,
            time_varying: pick(&partition.s_vary),
            constant: pick(&partition.s_const),
            zero: pick(&partition.s_zero),
            covariates,
        }
    }

    pub fn to_json(&self) -> Result<String> {
        let mut s = serde_json::to_string_pretty(self).map_err(|e| Error::Serialization(e.to_string()))?;
        s.push('\n');
        Ok(s)
    }

    pub fn summary(&self) -> String {
        let list = |v: &[String]| if v.is_empty() { "(none)".to_string() } else { v.join(", ") };
        format!(
            "tau = {:.6}\ntime-varying: {}\nconstant:     {}\nzero:         {}\n",
            self.threshold_used,
            list(&self.time_varying),
            list(&self.constant),
            list(&self.zero)
        )
    }
}

/// `k,t,beta_hat` on `points` equally spaced times in `[0, 1]`, on the
/// standardized covariate scale; `k` is 1-based.
pub fn write_curves_csv(fit: &ModelFit, points: usize, mut out: impl Write) -> Result<()> {
    let grid = unit_grid(points);
    let io = |e| Error::Serialization(format!("writing curves: {e}"));
    writeln!(out, "k,t,beta_hat").map_err(io)?;
    for k in 0..fit.p() {
        for &t in &grid {
            writeln!(out, "{},{},{}", k + 1, fmt_f64(t), fmt_f64(fit.beta_curve(k, t)?)).map_err(io)?;
        }
    }
    Ok(())
}

/// `subject,time,fitted` in design row order, time on the original scale.
fn write_fitted_csv(fit: &ModelFit, prepared: &PreparedData, path: &Path) -> Result<()> {
    let fitted = fit.fitted_values(&prepared.design);
    let (lo, hi) = prepared.dataset.time_domain();
    let mut s = String::from("subject,time,fitted\n");
    let mut row = 0;
    for subj in prepared.dataset.subjects() {
        for &t in &subj.times {
            s.push_str(&format!(
                "{},{},{}\n",
                csv_field(&subj.subject_id),
                fmt_f64(lo + t * (hi - lo)),
                fmt_f64(fitted[row])
            ));
            row += 1;
        }
    }
    write_text(path, &s)
}

fn csv_field(s: &str) -> String {
    if s.contains([',', '"', '\n']) {
        format!("\"{}\"", s.replace('"', "\"\""))
    } else {
        s.to_string()
    }
}

/// Writes `fit.json`, `partition.json`, `curves.csv` and `fitted.csv`.
fn write_fit_outputs(fit: &ModelFit, prepared: &PreparedData, multiplier: f64, dir: &Path) -> Result<PartitionReport> {
    let artifact = FitArtifact::new(fit, &prepared.dataset, multiplier)?;
    artifact.save(dir.join("fit.json"))?;
    let report = PartitionReport::new(&artifact, &artifact.partition, multiplier);
    write_text(&dir.join("partition.json"), &report.to_json()?)?;
    let mut curves = Vec::new();
    write_curves_csv(fit, CURVE_GRID_SIZE, &mut curves)?;
    fs::write(dir.join("curves.csv"), curves).map_err(|e| Error::io(dir.join("curves.csv"), e))?;
    write_fitted_csv(fit, prepared, &dir.join("fitted.csv"))?;
    Ok(report)
}

fn cmd_fit(args: FitArgs) -> Result<()> {
    let config = args.config.clone();
    let mut args = merge_config(args, config.as_deref(), "fit")?;
    let settings = args.model.resolve()?;
    let lambda1 = required(&args.lambda1, "lambda1")?;
    let lambda2 = required(&args.lambda2, "lambda2")?;
    let penalty = PenaltyConfig::new(lambda1, lambda2);
    penalty.validate()?;

    let prepared = prepare_data(&settings.data, settings.spline, settings.demean, &settings.binary)?;
    create_dir(&settings.out)?;
    write_echo(&args, &settings.out, "fit")?;
    let fit = fit_method(&prepared.design, &prepared.basis, settings.method, &penalty, &settings.solver)?;
    if !fit.converged {
        warn(&format!("solver stopped after {} sweeps without converging", fit.iterations));
    }
    let report = write_fit_outputs(&fit, &prepared, settings.threshold_multiplier, &settings.out)?;
    print!("{}", report.summary());
    Ok(())
}

fn cmd_tune(args: TuneArgs) -> Result<()> {
    let config = args.config.clone();
    let mut args = merge_config(args, config.as_deref(), "tune")?;
    let settings = args.model.resolve()?;
    let criterion = match norm(args.criterion.get_or_insert_with(|| "ebic".into())).as_str() {
        "ebic" => Criterion::Ebic,
        "cv" | "cvmspe" => Criterion::CvMspe,
        other => return Err(Error::Config(format!("unknown criterion `{other}` (ebic, cv)"))),
    };
    args.criterion = Some(if criterion == Criterion::Ebic { "ebic" } else { "cv" }.into());
    let gamma = *args.gamma.get_or_insert(DEFAULT_GAMMA);

    let prepared = prepare_data(&settings.data, settings.spline, settings.demean, &settings.binary)?;
    let lambda1 = match &args.lambda1_values {
        Some(v) => v.clone(),
        None => {
            let n = *args.n_lambda1.get_or_insert(DEFAULT_NUM_LAMBDA1);
            let ratio = *args.lambda1_ratio.get_or_insert(DEFAULT_LAMBDA1_RATIO);
            if !(ratio > 0.0 && ratio <= 1.0) {
                return Err(Error::Config(format!("lambda1_ratio must lie in (0, 1], got {ratio}")));
            }
            let max = lambda1_max(&prepared.design)?;
            if max > 0.0 {
                log_spaced(max, ratio * max, n)
            } else {
                vec![0.0]
            }
        }
    };
    let lambda2 = match &args.lambda2_values {
        Some(v) => v.clone(),
        None => {
            let lo = *args.lambda2_min.get_or_insert(DEFAULT_LAMBDA2_RANGE.0);
            let hi = *args.lambda2_max.get_or_insert(DEFAULT_LAMBDA2_RANGE.1);
            let n = *args.n_lambda2.get_or_insert(DEFAULT_NUM_LAMBDA2);
            if !(lo > 0.0 && hi >= lo) {
                return Err(Error::Config(format!("invalid lambda2 range [{lo}, {hi}]")));
            }
            log_spaced(hi, lo, n)
        }
    };
    let grid = TuningGrid::new(lambda1, lambda2, gamma)?;
    let options = TuningOptions {
        solver: settings.solver,
        warm_start: !*args.cold_start.get_or_insert(false),
    };
    create_dir(&settings.out)?;
    write_echo(&args, &settings.out, "tune")?;

    let result = match criterion {
        Criterion::Ebic => tune_method_ebic(&prepared.design, &prepared.basis, settings.method, &grid, &options)?,
        Criterion::CvMspe => {
            let folds = *args.folds.get_or_insert(5);
            let seed = *args.seed.get_or_insert(1);
            tune_method_cv(&prepared.dataset, &prepared.basis, settings.method, &grid, folds, seed, &options)?
        }
    };
    if result.failed_fits > 0 {
        warn(&format!("{} grid points failed and were skipped", result.failed_fits));
    }
    result.save_surface_csv(&settings.out.join("surface.csv"))?;
    let report = write_fit_outputs(&result.best_fit, &prepared, settings.threshold_multiplier, &settings.out)?;
    println!(
        "best lambda1 = {}, lambda2 = {}, criterion = {}",
        fmt_f64(result.best_lambda1),
        fmt_f64(result.best_lambda2),
        fmt_f64(result.best_criterion())
    );
    print!("{}", report.summary());
    Ok(())
}

fn cmd_predict(args: PredictArgs) -> Result<()> {
    let config = args.config.clone();
    let args = merge_config(args, config.as_deref(), "predict")?;
    let fit_path = required(&args.fit, "fit")?;
    let data = required(&args.data, "data")?;
    let out = required(&args.out, "out")?;
    require_file(&fit_path)?;
    require_file(&data)?;
    let artifact = FitArtifact::load(&fit_path)?;
    let table = read_long_csv(&data, false)?;
    let rows = artifact.predict_table(&table)?;
    create_dir(&out)?;
    write_echo(&args, &out, "predict")?;
    write_predictions_csv(&rows, out.join("predictions.csv"))?;
    let bad = rows.iter().filter(|r| r.error.is_some()).count();
    if bad > 0 {
        warn(&format!("{bad} of {} rows could not be predicted; see the error column", rows.len()));
    }
    println!("{} predictions written", rows.len() - bad);
    Ok(())
}

fn cmd_classify(args: ClassifyArgs) -> Result<()> {
    let config = args.config.clone();
    let mut args = merge_config(args, config.as_deref(), "classify")?;
    let fit_path = required(&args.fit, "fit")?;
    let out = required(&args.out, "out")?;
    require_file(&fit_path)?;
    let artifact = FitArtifact::load(&fit_path)?;
    let multiplier = *args.threshold_multiplier.get_or_insert(artifact.threshold_multiplier);
    let fit = artifact.to_fit()?;
    let partition = classify(&fit, artifact.n_observations, artifact.p(), multiplier)?;
    let report = PartitionReport::new(&artifact, &partition, multiplier);
    create_dir(&out)?;
    write_echo(&args, &out, "classify")?;
    write_text(&out.join("partition.json"), &report.to_json()?)?;
    print!("{}", report.summary());
    Ok(())
}

fn parse_error_model(s: &str, nu: f64) -> Result<ErrorModel> {
    match norm(s).as_str() {
        "gauss" | "gaussian" | "normal" => Ok(ErrorModel::Gauss),
        "t" | "studentt" => Ok(ErrorModel::StudentT { nu }),
        "heteroscedastic" => Ok(ErrorModel::Heteroscedastic),
        "ar1" => Ok(ErrorModel::Ar1),
        _ => Err(Error::Config(format!(
            "unknown error model `{s}` (gauss, t, heteroscedastic, ar1)"
        ))),
    }
}

fn error_model_key(e: ErrorModel) -> &'static str {
    match e {
        ErrorModel::Gauss => "gauss",
        ErrorModel::StudentT { .. } => "t",
        ErrorModel::Heteroscedastic => "heteroscedastic",
        ErrorModel::Ar1 => "ar1",
    }
}

impl SimulateArgs {
    /// Builds the scenario from its defaults plus any given overrides, then
    /// writes every resolved value back so the echo is complete.
    fn resolve(&mut self) -> Result<(ScenarioSpec, StudyOptions)> {
        let scenario: Scenario = self.scenario.get_or_insert_with(|| "A".into()).parse()?;
        let n_subjects = *self.n_subjects.get_or_insert(100);
        let n_obs = *self.n_obs.get_or_insert(5);
        let p = *self.p.get_or_insert(20);
        if p == 0 {
            return Err(Error::Config("p must be positive".into()));
        }
        let mut spec = ScenarioSpec::new(scenario, n_subjects, n_obs, p);
        spec.s_v = *self.s_v.get_or_insert(spec.s_v);
        spec.s_c = *self.s_c.get_or_insert(spec.s_c);
        spec.q = *self.q.get_or_insert(spec.q);
        spec.rho = *self.rho.get_or_insert(spec.rho);
        spec.alpha = *self.alpha.get_or_insert(spec.alpha);
        spec.sigma = *self.sigma.get_or_insert(spec.sigma);
        spec.sigma_x2 = *self.sigma_x2.get_or_insert(spec.sigma_x2);
        spec.amplitude = *self.amplitude.get_or_insert(spec.amplitude);
        let default_nu = match spec.error_model {
            ErrorModel::StudentT { nu } => nu,
            _ => 3.0,
        };
        let nu = *self.nu.get_or_insert(default_nu);
        let em = self
            .error_model
            .get_or_insert_with(|| error_model_key(spec.error_model).into())
            .clone();
        spec.error_model = parse_error_model(&em, nu)?;
        self.error_model = Some(error_model_key(spec.error_model).into());
        let td = self.time_design.get_or_insert_with(|| {
            match spec.time_design {
                TimeDesign::Regular => "regular",
                TimeDesign::Irregular => "irregular",
            }
            .into()
        });
        spec.time_design = match norm(td).as_str() {
            "regular" => TimeDesign::Regular,
            "irregular" => TimeDesign::Irregular,
            _ => return Err(Error::Config(format!("unknown time design `{td}` (regular, irregular)"))),
        };
        let cd = self.covariate_design.get_or_insert_with(|| {
            match spec.covariate_design {
                CovariateDesign::Baseline => "baseline",
                CovariateDesign::TimeVarying => "time-varying",
            }
            .into()
        });
        spec.covariate_design = match norm(cd).as_str() {
            "baseline" => CovariateDesign::Baseline,
            "timevarying" => CovariateDesign::TimeVarying,
            _ => {
                return Err(Error::Config(format!(
                    "unknown covariate design `{cd}` (baseline, time-varying)"
                )))
            }
        };
        for note in spec.enforce_scenario() {
            warn(&note);
        }
        self.rho = Some(spec.rho);
        self.amplitude = Some(spec.amplitude);
        let seed = *self.seed.get_or_insert(1);
        spec.seed = seed;
        spec.validate()?;

        let methods: Vec<Method> = self
            .methods
            .get_or_insert_with(|| Method::ALL.iter().map(|&m| method_key(m).to_string()).collect())
            .iter()
            .map(|m| m.parse())
            .collect::<Result<_>>()?;
        self.methods = Some(methods.iter().map(|&m| method_key(m).to_string()).collect());
        let defaults = SolverOptions::default();
        let solver = SolverOptions {
            tol: *self.tol.get_or_insert(defaults.tol),
            max_iter: *self.max_iter.get_or_insert(defaults.max_iter),
            ..defaults
        };
        solver.validate()?;
        let gamma = *self.gamma.get_or_insert(DEFAULT_GAMMA);
        let grid = match (&self.lambda1_values, &self.lambda2_values) {
            (None, None) => None,
            (Some(l1), Some(l2)) => Some(TuningGrid::new(l1.clone(), l2.clone(), gamma)?),
            _ => {
                return Err(Error::Config(
                    "a fixed grid needs both lambda1_values and lambda2_values".into(),
                ))
            }
        };
        let options = StudyOptions {
            replications: *self.replications.get_or_insert(30),
            seed,
            methods,
            n_test: *self.n_test.get_or_insert(crate::simulate::DEFAULT_TEST_SUBJECTS),
            solver,
            gamma,
            grid,
            keep_curves: *self.curves.get_or_insert(false),
        };
        Ok((spec, options))
    }
}

fn cmd_simulate(args: SimulateArgs) -> Result<()> {
    let config = args.config.clone();
    let mut args = merge_config(args, config.as_deref(), "simulate")?;
    let out = required(&args.out, "out")?;
    let (spec, options) = args.resolve()?;
    create_dir(&out)?;
    write_echo(&args, &out, "simulate")?;
    let result = run_study(std::slice::from_ref(&spec), &options)?;
    for f in &result.failures {
        warn(f);
    }
    result.save_csv(&out.join("metrics.csv"))?;
    let summary = result.summary_table();
    write_text(&out.join("summary.txt"), &summary)?;
    if options.keep_curves {
        let dir = out.join("curves");
        create_dir(&dir)?;
        for c in &result.curves {
            let path = dir.join(format!(
                "{}_{}_r{:03}.csv",
                c.scenario,
                method_key(c.method),
                c.replication + 1
            ));
            let mut buf = Vec::new();
            c.write_csv(&mut buf).map_err(|e| Error::io(&path, e))?;
            fs::write(&path, buf).map_err(|e| Error::io(&path, e))?;
        }
    }
    print!("{summary}");
    Ok(())
}

//! Acceptance criteria. Each test prints one `criterion N: PASS|FAIL` line
//! with the measured quantities, then asserts.

use std::collections::BTreeSet;
use std::path::Path;
use std::process::Command;

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;

use tvselect::simulate::{make_truth, run_replication, run_study, Scenario, ScenarioSpec, StudyOptions};
use tvselect::solver::{constants_only_fit, fit_method, OracleOptions};
use tvselect::structure::misclassification_count;
use tvselect::tuning::lambda1_max;
use tvselect::{
    classify, fit_bcd, fit_oracle, objective, select_vary, write_long_csv, CenteredSplineBasis, DesignBlocks,
    KnotPlacement, LongitudinalDataset, Method, ModelFit, PenaltyConfig, SolverOptions, SplineConfig,
    SubjectRecord,
};

fn report(criterion: u32, pass: bool, detail: &str) {
    println!(
        "criterion {criterion}: {} | {detail}",
        if pass { "PASS" } else { "FAIL" }
    );
}

fn tight() -> SolverOptions {
    SolverOptions {
        tol: 1e-12,
        max_iter: 50_000,
        ..Default::default()
    }
}

/// Random baseline-plus-noise covariates, irregular times and a response
/// with one varying and one constant effect.
fn random_dataset(rng: &mut ChaCha8Rng, subjects: usize, obs: usize, p: usize, sigma: f64) -> LongitudinalDataset {
    let records = (0..subjects)
        .map(|i| {
            let mut times: Vec<f64> = (0..obs).map(|_| rng.gen::<f64>()).collect();
            times.sort_by(f64::total_cmp);
            let base: Vec<f64> = (0..p).map(|_| rng.sample(StandardNormal)).collect();
            let covariates: Vec<Vec<f64>> = (0..obs)
                .map(|_| base.iter().map(|b| b + 0.5 * rng.sample::<f64, _>(StandardNormal)).collect())
                .collect();
            let responses = times
                .iter()
                .zip(&covariates)
                .map(|(t, x)| {
                    let mut y = 0.2 + sigma * rng.sample::<f64, _>(StandardNormal);
                    y += x[0] * (1.0 + (2.0 * std::f64::consts::PI * t).sin());
                    if p > 1 {
                        y -= 0.8 * x[1];
                    }
                    y
                })
                .collect();
            SubjectRecord {
                subject_id: format!("s{i:03}"),
                times,
                responses,
                covariates,
            }
        })
        .collect();
    LongitudinalDataset::new(records, (1..=p).map(|k| format!("x{k}")).collect()).unwrap()
}

/// Block KKT conditions of the objective at `fit`: the largest excess of
/// `‖Z_kᵀr/n‖` over `λ₁` among zero blocks, and the largest stationarity
/// residual `‖−Z_kᵀr/n + 2λ₂Ωθ_k + λ₁θ_k/‖θ_k‖‖` among nonzero blocks.
fn kkt(design: &DesignBlocks, fit: &ModelFit) -> (f64, f64) {
    let n = design.n() as f64;
    let r = &design.y - fit.fitted_values(design);
    let omega = fit.basis.omega();
    let (l1, l2) = (fit.penalty.lambda1, fit.penalty.lambda2);
    let mut inactive = f64::NEG_INFINITY;
    let mut active: f64 = 0.0;
    for k in 0..design.p() {
        let g = design.z[k].tr_mul(&r) / n;
        let th = &fit.theta[k];
        let norm = th.norm();
        if norm == 0.0 {
            inactive = inactive.max(g.norm() - l1);
        } else {
            let res = -g + omega * th * (2.0 * l2) + th * (l1 / norm);
            active = active.max(res.norm());
        }
    }
    (inactive, active)
}

fn kkt_ok(design: &DesignBlocks, fit: &ModelFit) -> bool {
    let (inactive, active) = kkt(design, fit);
    inactive <= 1e-6 && active < 1e-5
}

#[test]
fn criterion_1_oracle_equivalence() {
    let start = std::time::Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(20_240_101);
    let mut worst: f64 = 0.0;
    let mut kkt_failures = 0;
    for _ in 0..50 {
        let subjects = rng.gen_range(5..=30);
        let obs = rng.gen_range(2..=5);
        let p = rng.gen_range(1..=5);
        let q = rng.gen_range(4..=8);
        let data = random_dataset(&mut rng, subjects, obs, p, 0.5);
        let basis = CenteredSplineBasis::build(SplineConfig::cubic(q).unwrap(), &[]).unwrap();
        let design = data.build_design(&basis).unwrap();
        let l1 = rng.gen::<f64>() * lambda1_max(&design).unwrap();
        let l2 = rng.gen::<f64>();
        let penalty = PenaltyConfig::new(l1, l2);
        let bcd = fit_bcd(&design, &basis, &penalty, &tight()).unwrap();
        let oracle = fit_oracle(&design, &basis, &penalty, &OracleOptions::default()).unwrap();
        let (qb, qo) = (objective(&design, &bcd).unwrap(), objective(&design, &oracle).unwrap());
        worst = worst.max((qb - qo).abs() / (1.0 + qo));
        if bcd.converged && !kkt_ok(&design, &bcd) {
            kkt_failures += 1;
        }
    }
    let secs = start.elapsed().as_secs_f64();
    let pass = worst < 1e-6 && secs < 60.0;
    report(
        1,
        pass,
        &format!("max relative objective gap {worst:.2e} over 50 instances in {secs:.1}s (KKT failures {kkt_failures})"),
    );
    assert!(pass);
    assert_eq!(kkt_failures, 0);
}

#[test]
fn criterion_2_spline_correctness() {
    let mut pou: f64 = 0.0;
    let mut centered: f64 = 0.0;
    let mut omega_rel: f64 = 0.0;
    let mut rank_ok = true;
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let times: Vec<f64> = (0..200).map(|_| rng.gen::<f64>()).collect();
    for q in 4..=12 {
        for placement in [KnotPlacement::EquallySpaced, KnotPlacement::TimeQuantiles] {
            let config = SplineConfig::new(3, q - 4, placement);
            let basis = CenteredSplineBasis::build(config, &times).unwrap();
            for i in 0..=1000 {
                let t = i as f64 / 1000.0;
                pou = pou.max((basis.eval_raw(t).unwrap().sum() - 1.0).abs());
            }
            // composite Simpson on a fine grid: independent of the basis's
            // own quadrature
            let m = 20_000;
            let h = 1.0 / m as f64;
            let simpson = |f: &dyn Fn(f64) -> f64| {
                (0..=m)
                    .map(|i| {
                        let w = if i == 0 || i == m { 1.0 } else if i % 2 == 1 { 4.0 } else { 2.0 };
                        w * f(i as f64 * h)
                    })
                    .sum::<f64>()
                    * h
                    / 3.0
            };
            for l in 0..q {
                let integral = simpson(&|t| basis.eval_centered(t).unwrap()[l]);
                centered = centered.max(integral.abs());
            }
            let theta = DVector::from_fn(q, |_, _| rng.sample::<f64, _>(StandardNormal));
            let analytic = basis.roughness_quadratic_form(&theta).unwrap();
            let fd = 1e-4;
            let second = |t: f64| {
                let c = |u: f64| basis.curve(&theta, u.clamp(0.0, 1.0)).unwrap();
                let t = t.clamp(fd, 1.0 - fd);
                (c(t + fd) - 2.0 * c(t) + c(t - fd)) / (fd * fd)
            };
            let numeric = simpson(&|t| second(t).powi(2));
            omega_rel = omega_rel.max((numeric - analytic).abs() / analytic);
            if basis.roughness().numerical_rank(1e-10) != q - 2 {
                rank_ok = false;
            }
        }
    }
    let pass = pou < 1e-12 && centered < 1e-10 && omega_rel < 0.01 && rank_ok;
    report(
        2,
        pass,
        &format!(
            "partition of unity {pou:.1e}, centered integral {centered:.1e}, roughness vs finite differences {:.3}%, rank q-2 {rank_ok}",
            100.0 * omega_rel
        ),
    );
    assert!(pass);
}

#[test]
fn criterion_3_kkt_certificate() {
    // TV-Select fits from random instances, a penalty path and simulated
    // scenarios
    let mut fits: Vec<(DesignBlocks, ModelFit)> = Vec::new();
    let mut rng = ChaCha8Rng::seed_from_u64(33);
    for _ in 0..20 {
        let data = random_dataset(&mut rng, 25, 4, 4, 0.7);
        let basis = CenteredSplineBasis::build(SplineConfig::cubic(7).unwrap(), &[]).unwrap();
        let design = data.build_design(&basis).unwrap();
        let lmax = lambda1_max(&design).unwrap();
        for frac in [0.9, 0.3, 0.05] {
            let penalty = PenaltyConfig::new(frac * lmax, rng.gen::<f64>() * 0.1);
            let fit = fit_bcd(&design, &basis, &penalty, &tight()).unwrap();
            fits.push((design.clone(), fit));
        }
    }
    for seed in 0..5 {
        let spec = ScenarioSpec::new(Scenario::A, 80, 5, 12).with_sparsity(3, 3).with_seed(seed);
        let data = tvselect::simulate::generate(&spec).unwrap().standardize(&[]).unwrap();
        let basis = CenteredSplineBasis::build(SplineConfig::cubic(8).unwrap(), &[]).unwrap();
        let design = data.build_design(&basis).unwrap();
        let lmax = lambda1_max(&design).unwrap();
        for (frac, l2) in [(0.3, 1e-4), (0.1, 1e-2), (0.02, 1e-3)] {
            let fit = fit_bcd(&design, &basis, &PenaltyConfig::new(frac * lmax, l2), &tight()).unwrap();
            fits.push((design.clone(), fit));
        }
    }
    let converged: Vec<&(DesignBlocks, ModelFit)> = fits.iter().filter(|(_, f)| f.converged).collect();
    let (mut worst_inactive, mut worst_active) = (f64::NEG_INFINITY, 0.0f64);
    for (design, fit) in &converged {
        let (i, a) = kkt(design, fit);
        worst_inactive = worst_inactive.max(i);
        worst_active = worst_active.max(a);
    }
    let pass = !converged.is_empty() && worst_inactive <= 1e-6 && worst_active < 1e-5;
    report(
        3,
        pass,
        &format!(
            "{} converged fits of {}: max(|Z'e/n| - lambda1) over zero blocks {worst_inactive:.2e}, max stationarity residual {worst_active:.2e}",
            converged.len(),
            fits.len()
        ),
    );
    assert!(pass);
}

#[test]
fn criterion_4_scaled_scenario_a() {
    let start = std::time::Instant::now();
    let spec = ScenarioSpec::new(Scenario::A, 100, 5, 20).with_sparsity(3, 3);
    let options = StudyOptions {
        replications: 30,
        seed: 2024,
        ..Default::default()
    };
    let result = run_study(&[spec], &options).unwrap();
    let secs = start.elapsed().as_secs_f64();
    print!("{}", result.summary_table());
    let get = |m: Method| result.report(Scenario::A, m).unwrap();
    let tv = get(Method::TvSelect);
    let gl = get(Method::GroupLasso);
    let sr = get(Method::ScreenRefit);
    let vc = get(Method::VcRidge);

    let checks = [
        ("TPR_vary >= 0.9", tv.tpr_vary.mean >= 0.9),
        ("FPR_vary <= 0.05", tv.fpr_vary.mean <= 0.05),
        ("ClassAcc >= 0.9", tv.class_acc.mean >= 0.9),
        ("RE 5x below Group-Lasso", 5.0 * tv.re.mean <= gl.re.mean),
        ("MSPE TV-Select < Screen+Refit", tv.mspe.mean < sr.mspe.mean),
        (
            "MSPE Screen+Refit <= Group-Lasso, VC-Ridge",
            sr.mspe.mean <= gl.mspe.mean && sr.mspe.mean <= vc.mspe.mean,
        ),
        ("runtime <= 10 min", secs <= 600.0),
    ];
    let failed: Vec<&str> = checks.iter().filter(|(_, ok)| !ok).map(|(name, _)| *name).collect();
    report(
        4,
        failed.is_empty(),
        &format!(
            "TV-Select TPR {:.3} FPR {:.3} ClassAcc {:.3} RE {:.1} MSPE {:.4}; Group-Lasso RE {:.1} MSPE {:.4}; \
             Screen+Refit MSPE {:.4}; VC-Ridge MSPE {:.4}; {secs:.0}s; unmet: {}",
            tv.tpr_vary.mean,
            tv.fpr_vary.mean,
            tv.class_acc.mean,
            tv.re.mean,
            tv.mspe.mean,
            gl.re.mean,
            gl.mspe.mean,
            sr.mspe.mean,
            vc.mspe.mean,
            if failed.is_empty() { "none".to_string() } else { failed.join("; ") }
        ),
    );
    assert!(failed.is_empty(), "unmet: {failed:?}");
}

/// Long-running check at the full (100,5,100) configuration with 200
/// replications: TV-Select MSE_mu within a factor of 3 of 0.0042.
#[test]
#[ignore = "long-running; run with --ignored"]
fn criterion_4_long_mode() {
    let spec = ScenarioSpec::new(Scenario::A, 100, 5, 100);
    let options = StudyOptions {
        replications: 200,
        seed: 2024,
        methods: vec![Method::TvSelect],
        ..Default::default()
    };
    let result = run_study(&[spec], &options).unwrap();
    let mse = result.report(Scenario::A, Method::TvSelect).unwrap().mse_mu.mean;
    let pass = mse <= 3.0 * 0.0042 && mse >= 0.0042 / 3.0;
    report(4, pass, &format!("long mode: TV-Select MSE_mu {mse:.5} (target 0.0042 within 3x)"));
    assert!(pass);
}

#[test]
fn criterion_5_misclassification_decreases_with_n() {
    let options = StudyOptions {
        replications: 20,
        seed: 77,
        methods: vec![Method::TvSelect],
        n_test: 50,
        ..Default::default()
    };
    let mut medians = Vec::new();
    for n_subjects in [100, 200, 400] {
        let spec = ScenarioSpec::new(Scenario::A, n_subjects, 5, 20).with_sparsity(3, 3);
        let truth = make_truth(&spec).unwrap();
        let mut counts: Vec<usize> = (0..options.replications)
            .into_par_iter()
            .map(|r| {
                let out = run_replication(&spec, r, &options).unwrap();
                let metrics = out.results[0].1.as_ref().unwrap();
                misclassification_count(&metrics.partition, &truth.partition)
            })
            .collect();
        counts.sort_unstable();
        let median = (counts[9] + counts[10]) as f64 / 2.0;
        medians.push((n_subjects * 5, median));
    }
    let pass = medians.windows(2).all(|w| w[1].1 <= w[0].1);
    report(5, pass, &format!("median misclassification count by n: {medians:?}"));
    assert!(pass);
}

#[test]
fn criterion_6_noiseless_recovery() {
    let basis = CenteredSplineBasis::build(SplineConfig::cubic(8).unwrap(), &[]).unwrap();
    let theta_true = DVector::from_vec(vec![0.8, -0.4, 0.9, 0.2, -0.7, 0.5, -0.3, 0.6]);
    // 2 constant, 1 varying, 2 null effects
    let mu_true = [0.5, 1.0, -1.5, 0.0, 0.0];
    let truth_vary = BTreeSet::from([0usize]);
    let truth_const = BTreeSet::from([1usize, 2]);
    let p = mu_true.len();
    let beta = |k: usize, t: f64| {
        if k == 0 {
            mu_true[0] + basis.curve(&theta_true, t).unwrap()
        } else {
            mu_true[k]
        }
    };
    let mut successes = 0;
    let mut worst_ise: f64 = 0.0;
    for run in 0..10u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(600 + run);
        let records: Vec<SubjectRecord> = (0..100)
            .map(|i| {
                let mut times: Vec<f64> = (0..5).map(|_| rng.gen::<f64>()).collect();
                times.sort_by(f64::total_cmp);
                let covariates: Vec<Vec<f64>> = (0..5)
                    .map(|_| (0..p).map(|_| rng.sample(StandardNormal)).collect())
                    .collect();
                let responses = times
                    .iter()
                    .zip(&covariates)
                    .map(|(&t, x)| (0..p).map(|k| x[k] * beta(k, t)).sum())
                    .collect();
                SubjectRecord {
                    subject_id: format!("s{i}"),
                    times,
                    responses,
                    covariates,
                }
            })
            .collect();
        let data = LongitudinalDataset::new(records, (1..=p).map(|k| format!("x{k}")).collect()).unwrap();
        let design = data.build_design(&basis).unwrap();
        // small enough for negligible shrinkage bias, large enough that the
        // null blocks are cut to exact zero before the relative stopping
        // rule fires on the near-zero objective
        let penalty = PenaltyConfig::new(1e-5 * lambda1_max(&design).unwrap(), 0.0);
        let fit = fit_bcd(&design, &basis, &penalty, &tight()).unwrap();
        let grid: Vec<f64> = (0..200).map(|g| g as f64 / 199.0).collect();
        let ise = (0..p)
            .map(|k| grid.iter().map(|&t| (fit.beta_curve(k, t).unwrap() - beta(k, t)).powi(2)).sum::<f64>() / 200.0)
            .sum::<f64>();
        worst_ise = worst_ise.max(ise);
        let part = classify(&fit, design.n(), p, 1.0).unwrap();
        if ise < 1e-6 && part.s_vary == truth_vary && part.s_const == truth_const {
            successes += 1;
        }
    }
    let pass = successes == 10;
    report(6, pass, &format!("{successes}/10 exact recoveries, max ISE {worst_ise:.2e}"));
    assert!(pass);
}

fn run_cli(args: &[&str]) {
    let status = Command::new(env!("CARGO_BIN_EXE_tvselect"))
        .args(args)
        .stdout(std::process::Stdio::null())
        .stderr(std::process::Stdio::null())
        .status()
        .unwrap();
    assert!(status.success(), "tvselect {args:?} failed with {status}");
}

fn snapshot(dir: &Path) -> Vec<(String, Vec<u8>)> {
    let mut files = Vec::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for entry in std::fs::read_dir(&d).unwrap() {
            let path = entry.unwrap().path();
            if path.is_dir() {
                stack.push(path);
            } else {
                let rel = path.strip_prefix(dir).unwrap().display().to_string();
                files.push((rel, std::fs::read(&path).unwrap()));
            }
        }
    }
    files.sort();
    files
}

#[test]
fn criterion_7_cli_determinism() {
    let tmp = tempfile::tempdir().unwrap();
    let root = tmp.path();
    let spec = ScenarioSpec::new(Scenario::E, 40, 4, 6).with_sparsity(2, 2).with_seed(9);
    let data = tvselect::simulate::generate(&spec).unwrap();
    let csv = root.join("data.csv");
    write_long_csv(&data, &csv).unwrap();
    let csv = csv.to_str().unwrap().to_string();
    let out = root.join("out");
    let o = |name: &str| out.join(name).to_str().unwrap().to_string();

    let run_all = || {
        let _ = std::fs::remove_dir_all(&out);
        run_cli(&["fit", "--data", &csv, "--out", &o("fit"), "--lambda1", "0.02", "--lambda2", "0.001"]);
        run_cli(&["tune", "--data", &csv, "--out", &o("tune"), "--n-lambda1", "6", "--n-lambda2", "2"]);
        run_cli(&[
            "tune", "--data", &csv, "--out", &o("cv"), "--criterion", "cv", "--folds", "4", "--seed", "3",
            "--n-lambda1", "5", "--n-lambda2", "2",
        ]);
        run_cli(&["predict", "--fit", &format!("{}/fit.json", o("fit")), "--data", &csv, "--out", &o("predict")]);
        run_cli(&["classify", "--fit", &format!("{}/fit.json", o("fit")), "--out", &o("classify")]);
        run_cli(&[
            "simulate", "--scenario", "A", "--n-subjects", "30", "--n-obs", "4", "--p", "6", "--s-v", "2", "--s-c",
            "2", "--replications", "3", "--n-test", "40", "--seed", "5", "--curves", "true", "--out", &o("simulate"),
        ]);
        run_cli(&[
            "--threads", "1", "simulate", "--scenario", "A", "--n-subjects", "30", "--n-obs", "4", "--p", "6",
            "--s-v", "2", "--s-c", "2", "--replications", "3", "--n-test", "40", "--seed", "5", "--curves", "true",
            "--out", &o("simulate_1thread"),
        ]);
        snapshot(&out)
    };
    let first = run_all();
    let second = run_all();
    let differing: Vec<&str> = first
        .iter()
        .zip(&second)
        .filter(|(a, b)| a != b)
        .map(|(a, _)| a.0.as_str())
        .collect();
    let same_names = first.iter().map(|f| &f.0).eq(second.iter().map(|f| &f.0));
    // the single-thread study must match the parallel one apart from its echo
    let pick = |dir: &str| -> Vec<&(String, Vec<u8>)> {
        first
            .iter()
            .filter(|(name, _)| name.starts_with(&format!("{dir}/")) && !name.ends_with("config.toml"))
            .collect()
    };
    let threads_agree = pick("simulate")
        .iter()
        .zip(pick("simulate_1thread"))
        .all(|(a, b)| a.1 == b.1);
    let pass = same_names && differing.is_empty() && threads_agree && first.len() > 10;
    report(
        7,
        pass,
        &format!(
            "{} output files from fit, tune (EBIC, CV), predict, classify, simulate; differing: {differing:?}; thread count irrelevant: {threads_agree}",
            first.len()
        ),
    );
    assert!(pass);
}

#[test]
fn criterion_8_baseline_contracts() {
    let mut rng = ChaCha8Rng::seed_from_u64(88);
    let opts = SolverOptions::default();

    let mut ridge_zero_blocks = 0;
    let mut ridge_fits = 0;
    let mut gl_nonzero = 0;
    let mut worst_refit: f64 = 0.0;
    for _ in 0..10 {
        let data = random_dataset(&mut rng, 30, 5, 5, 1.0);
        let basis = CenteredSplineBasis::build(SplineConfig::cubic(8).unwrap(), &[]).unwrap();
        let design = data.build_design(&basis).unwrap();
        for l2 in [1e-4, 1e-2, 1.0, 100.0] {
            let fit = fit_method(&design, &basis, Method::VcRidge, &PenaltyConfig::new(0.0, l2), &opts).unwrap();
            ridge_fits += 1;
            ridge_zero_blocks += fit.theta.iter().filter(|t| t.iter().all(|&v| v == 0.0)).count();
        }
        let lmax = lambda1_max(&design).unwrap();
        let gl = fit_method(&design, &basis, Method::GroupLasso, &PenaltyConfig::new(lmax * 1.01, 0.0), &opts).unwrap();
        gl_nonzero += select_vary(&gl).len();

        let sr = fit_method(&design, &basis, Method::ScreenRefit, &PenaltyConfig::new(lmax * 1.5, 0.0), &opts).unwrap();
        // direct least squares on [1, X] via SVD
        let n = design.n();
        let d = DMatrix::from_fn(n, design.p() + 1, |i, j| if j == 0 { 1.0 } else { design.x[(i, j - 1)] });
        let coef = d.svd(true, true).solve(&design.y, 1e-12).unwrap();
        let mut err = (sr.beta0 - coef[0]).abs();
        for k in 0..design.p() {
            err = err.max((sr.mu[k] - coef[k + 1]).abs());
        }
        if !select_vary(&sr).is_empty() {
            err = f64::INFINITY;
        }
        worst_refit = worst_refit.max(err);
        let (b0, mu) = constants_only_fit(&design, true).unwrap();
        assert!((b0 - coef[0]).abs() < 1e-8 && (mu - coef.rows(1, design.p())).amax() < 1e-8);
    }
    let pass = ridge_zero_blocks == 0 && gl_nonzero == 0 && worst_refit < 1e-8;
    report(
        8,
        pass,
        &format!(
            "VC-Ridge zero blocks {ridge_zero_blocks} in {ridge_fits} fits; Group-Lasso above lambda1_max nonzero blocks {gl_nonzero}; \
             empty-screen refit vs direct least squares {worst_refit:.1e}"
        ),
    );
    assert!(pass);
}

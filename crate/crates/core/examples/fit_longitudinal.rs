//! End-to-end fit from a long-format CSV: load, standardize, fit TV-Select at
//! one penalty pair, classify the effects and save the fit artifact.
//!
//! With no argument a Scenario A dataset is simulated and written to a
//! temporary directory first.
//!
//!     cargo run --release --example fit_longitudinal [-- data.csv]

use std::path::PathBuf;

use tvselect::artifact::FitArtifact;
use tvselect::cli::prepare_data;
use tvselect::simulate::{generate, Scenario, ScenarioSpec};
use tvselect::{classify, fit_bcd, write_long_csv, PenaltyConfig, SolverOptions, SplineConfig};

fn main() -> tvselect::Result<()> {
    let dir = std::env::temp_dir().join("tvselect-fit-example");
    std::fs::create_dir_all(&dir).expect("temp dir");
    let path = match std::env::args().nth(1) {
        Some(p) => PathBuf::from(p),
        None => {
            let spec = ScenarioSpec::new(Scenario::A, 100, 5, 12).with_sparsity(3, 3).with_seed(11);
            let data = generate(&spec)?;
            let path = dir.join("scenario_a.csv");
            write_long_csv(&data, &path)?;
            println!("simulated data written to {}", path.display());
            path
        }
    };

    // Baseline covariates are constant within subject, so this example keeps
    // an intercept instead of de-meaning.
    let prepared = prepare_data(&path, SplineConfig::cubic(8)?, false, &[])?;
    let design = &prepared.design;
    println!("n = {}, p = {}, q = {}", design.n(), design.p(), design.q());

    let penalty = PenaltyConfig::new(0.05, 1e-3);
    let fit = fit_bcd(design, &prepared.basis, &penalty, &SolverOptions::default())?;
    println!(
        "converged = {} after {} sweeps, objective {:.6}",
        fit.converged,
        fit.iterations,
        fit.final_objective().unwrap_or(f64::NAN)
    );

    let part = classify(&fit, design.n(), design.p(), 1.0)?;
    let names = prepared.dataset.covariate_names();
    for k in 0..design.p() {
        println!(
            "{:>4}  {:?}  mu = {:+.4}  |theta| = {:.4}",
            names[k],
            part.class_of(k).unwrap(),
            fit.mu[k],
            fit.theta[k].norm()
        );
    }
    println!("tau = {:.4}", part.threshold_used);

    let artifact = FitArtifact::new(&fit, &prepared.dataset, 1.0)?;
    let out = dir.join("fit.json");
    artifact.save(&out)?;
    println!("fit saved to {}", out.display());
    Ok(())
}

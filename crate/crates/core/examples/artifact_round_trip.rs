//! Saves a fit, reloads it and predicts new rows, including one whose time
//! lies outside the training range.

use tvselect::artifact::FitArtifact;
use tvselect::data::{read_long_csv, LongTable};
use tvselect::simulate::{generate, Scenario, ScenarioSpec};
use tvselect::{fit_bcd, write_long_csv, CenteredSplineBasis, PenaltyConfig, SolverOptions, SplineConfig};

fn main() -> tvselect::Result<()> {
    let dir = std::env::temp_dir().join("tvselect-artifact-example");
    std::fs::create_dir_all(&dir).expect("temp dir");
    let spec = ScenarioSpec::new(Scenario::A, 50, 5, 6).with_sparsity(2, 2).with_seed(4);
    let raw = generate(&spec)?;
    let train = raw.standardize(&[])?;
    let basis = CenteredSplineBasis::build(SplineConfig::cubic(8)?, &[])?;
    let design = train.build_design(&basis)?;
    let fit = fit_bcd(&design, &basis, &PenaltyConfig::new(0.05, 1e-3), &SolverOptions::default())?;

    let path = dir.join("fit.json");
    FitArtifact::new(&fit, &train, 1.0)?.save(&path)?;
    let loaded = FitArtifact::load(&path)?;
    println!("reloaded {} fit with {} covariates", loaded.method, loaded.p());

    let csv = dir.join("train.csv");
    write_long_csv(&raw, &csv)?;
    let table = read_long_csv(&csv, true)?;
    let preds = loaded.predict_table(&table)?;
    let fitted = fit.fitted_values(&design);
    let worst = preds
        .iter()
        .zip(fitted.iter())
        .map(|(p, f)| (p.prediction.unwrap() - f).abs())
        .fold(0.0, f64::max);
    println!("max |prediction - in-sample fitted| = {worst:.2e}");

    let odd = LongTable {
        subject: vec!["new".into(), "new".into()],
        time: vec![0.5, 1.25],
        y: None,
        x: vec![table.x[0].clone(), table.x[1].clone()],
        covariate_names: table.covariate_names.clone(),
    };
    for row in loaded.predict_table(&odd)? {
        println!("row {}: prediction {:?}, error {:?}", row.row, row.prediction, row.error);
    }
    Ok(())
}

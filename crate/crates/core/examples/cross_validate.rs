//! Subject-wise K-fold cross-validation as an alternative to EBIC.

use tvselect::simulate::{generate, Scenario, ScenarioSpec};
use tvselect::tuning::{log_spaced, subject_folds, tune_cv, tune_ebic, lambda1_max, TuningGrid, TuningOptions};
use tvselect::{select_vary, CenteredSplineBasis, SplineConfig};

fn main() -> tvselect::Result<()> {
    let spec = ScenarioSpec::new(Scenario::C, 60, 5, 10).with_sparsity(2, 2).with_seed(8);
    let data = generate(&spec)?.standardize(&[])?;
    let basis = CenteredSplineBasis::build(SplineConfig::cubic(spec.q)?, &[])?;
    let design = data.build_design(&basis)?;
    let l1max = lambda1_max(&design)?;
    let grid = TuningGrid::new(log_spaced(l1max, 1e-2 * l1max, 10), vec![1e-2, 1e-4], 0.5)?;

    let folds = subject_folds(&data, 5, 42)?;
    let sizes: Vec<usize> = (0..5).map(|f| folds.iter().filter(|&&g| g == f).count()).collect();
    println!("subjects per fold: {sizes:?}");

    let cv = tune_cv(&data, &basis, &grid, 5, 42, &TuningOptions::default())?;
    let eb = tune_ebic(&design, &basis, &grid, &TuningOptions::default())?;
    println!(
        "CV:   lambda1 = {:.4e}, lambda2 = {:.0e}, held-out MSE {:.4}, blocks {:?}",
        cv.best_lambda1,
        cv.best_lambda2,
        cv.best_criterion(),
        select_vary(&cv.best_fit)
    );
    println!(
        "EBIC: lambda1 = {:.4e}, lambda2 = {:.0e}, blocks {:?}",
        eb.best_lambda1,
        eb.best_lambda2,
        select_vary(&eb.best_fit)
    );
    Ok(())
}

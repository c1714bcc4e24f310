//! How the threshold multiplier in `tau = c * sqrt(log p / n)` moves
//! covariates between the constant and zero classes.

use tvselect::simulate::{generate, make_truth, Scenario, ScenarioSpec};
use tvselect::structure::{misclassification_count, threshold};
use tvselect::tuning::{tune_ebic, TuningGrid, TuningOptions};
use tvselect::{classify, CenteredSplineBasis, SplineConfig};

fn main() -> tvselect::Result<()> {
    let spec = ScenarioSpec::new(Scenario::A, 200, 5, 20).with_sparsity(3, 3).with_seed(21);
    let truth = make_truth(&spec)?;
    let data = generate(&spec)?.standardize(&[])?;
    let basis = CenteredSplineBasis::build(SplineConfig::cubic(spec.q)?, &[])?;
    let design = data.build_design(&basis)?;
    let fit = tune_ebic(&design, &basis, &TuningGrid::default_for(&design)?, &TuningOptions::default())?.best_fit;

    let (n, p) = (design.n(), design.p());
    println!("n = {n}, p = {p}");
    for c in [0.0, 0.5, 1.0, 2.0, 4.0] {
        let part = classify(&fit, n, p, c)?;
        println!(
            "c = {c:<4} tau = {:.4}  |vary| = {}  |const| = {:>2}  |zero| = {:>2}  misclassified = {}",
            threshold(n, p, c),
            part.s_vary.len(),
            part.s_const.len(),
            part.s_zero.len(),
            misclassification_count(&part, &truth.partition)
        );
    }
    Ok(())
}

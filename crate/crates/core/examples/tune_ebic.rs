//! EBIC tuning over the default grid, printing the criterion surface and
//! the selected structure.

use tvselect::simulate::{generate, make_truth, Scenario, ScenarioSpec};
use tvselect::structure::misclassification_count;
use tvselect::tuning::{tune_ebic, TuningGrid, TuningOptions};
use tvselect::{classify, CenteredSplineBasis, SplineConfig};

fn main() -> tvselect::Result<()> {
    let spec = ScenarioSpec::new(Scenario::A, 100, 5, 20).with_sparsity(3, 3).with_seed(5);
    let truth = make_truth(&spec)?;
    let data = generate(&spec)?.standardize(&[])?;
    let basis = CenteredSplineBasis::build(SplineConfig::cubic(spec.q)?, &[])?;
    let design = data.build_design(&basis)?;
    let grid = TuningGrid::default_for(&design)?;
    let res = tune_ebic(&design, &basis, &grid, &TuningOptions::default())?;

    print!("{:>10}", "l1 \\ l2");
    for l2 in &res.grid.lambda2_values {
        print!(" {l2:>9.1e}");
    }
    println!();
    for (i, l1) in res.grid.lambda1_values.iter().enumerate() {
        print!("{l1:>10.3e}");
        for j in 0..res.grid.lambda2_values.len() {
            print!(" {:>9.4}", res.criterion_surface[(i, j)]);
        }
        println!();
    }
    println!(
        "selected lambda1 = {:.4e}, lambda2 = {:.1e} (EBIC {:.4})",
        res.best_lambda1,
        res.best_lambda2,
        res.best_criterion()
    );

    let part = classify(&res.best_fit, design.n(), design.p(), 1.0)?;
    println!("time-varying {:?}", part.s_vary);
    println!("constant     {:?}", part.s_const);
    println!("misclassified covariates: {}", misclassification_count(&part, &truth.partition));
    Ok(())
}

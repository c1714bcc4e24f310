//! The three comparison estimators next to TV-Select on one simulated
//! dataset, each at its own EBIC-selected penalty.

use tvselect::simulate::{generate, Scenario, ScenarioSpec};
use tvselect::tuning::{tune_method_ebic, TuningGrid, TuningOptions};
use tvselect::{select_vary, CenteredSplineBasis, Method, SplineConfig};

fn main() -> tvselect::Result<()> {
    let spec = ScenarioSpec::new(Scenario::A, 100, 5, 20).with_sparsity(3, 3).with_seed(3);
    let data = generate(&spec)?.standardize(&[])?;
    let basis = CenteredSplineBasis::build(SplineConfig::cubic(spec.q)?, &[])?;
    let design = data.build_design(&basis)?;
    let grid = TuningGrid::default_for(&design)?;

    println!("{:<14} {:>10} {:>10} {:>10}  selected blocks", "method", "lambda1", "lambda2", "EBIC");
    for method in Method::ALL {
        let res = tune_method_ebic(&design, &basis, method, &grid, &TuningOptions::default())?;
        println!(
            "{:<14} {:>10.3e} {:>10.3e} {:>10.4}  {:?}",
            method.label(),
            res.best_lambda1,
            res.best_lambda2,
            res.best_criterion(),
            select_vary(&res.best_fit)
        );
    }
    println!("true time-varying blocks: {:?}", (0..spec.s_v).collect::<Vec<_>>());
    Ok(())
}

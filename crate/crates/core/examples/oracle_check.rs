//! Cross-checks block coordinate descent against the accelerated
//! proximal-gradient solver on a few random problems.

use tvselect::simulate::{generate, Scenario, ScenarioSpec};
use tvselect::solver::OracleOptions;
use tvselect::tuning::lambda1_max;
use tvselect::{fit_bcd, fit_oracle, objective, CenteredSplineBasis, PenaltyConfig, SolverOptions, SplineConfig};

fn main() -> tvselect::Result<()> {
    let solver = SolverOptions {
        tol: 1e-12,
        max_iter: 20_000,
        ..Default::default()
    };
    for seed in 0..5u64 {
        let spec = ScenarioSpec::new(Scenario::A, 30, 5, 5).with_sparsity(2, 2).with_seed(seed);
        let data = generate(&spec)?.standardize(&[])?;
        let basis = CenteredSplineBasis::build(SplineConfig::cubic(6)?, &[])?;
        let design = data.build_design(&basis)?;
        let l1max = lambda1_max(&design)?;
        let penalty = PenaltyConfig::new(0.2 * l1max, 0.01);

        let bcd = fit_bcd(&design, &basis, &penalty, &solver)?;
        let oracle = fit_oracle(&design, &basis, &penalty, &OracleOptions::default())?;
        let (qb, qo) = (objective(&design, &bcd)?, objective(&design, &oracle)?);
        println!(
            "seed {seed}: BCD {qb:.10}  oracle {qo:.10}  relative gap {:.1e}  ({} sweeps / {} iterations)",
            (qb - qo).abs() / (1.0 + qo),
            bcd.iterations,
            oracle.iterations
        );
    }
    Ok(())
}

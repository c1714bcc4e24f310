//! A small replicated comparison of the four methods under one scenario.
//!
//!     cargo run --release --example simulate_study [-- SCENARIO REPLICATIONS]

use tvselect::simulate::{run_study, Scenario, ScenarioSpec, StudyOptions};

fn main() -> tvselect::Result<()> {
    let mut args = std::env::args().skip(1);
    let scenario: Scenario = args.next().as_deref().unwrap_or("A").parse()?;
    let replications: usize = args.next().map_or(10, |r| r.parse().expect("replication count"));

    let spec = ScenarioSpec::new(scenario, 100, 5, 20).with_sparsity(3, 3);
    let options = StudyOptions {
        replications,
        seed: 2024,
        keep_curves: true,
        ..Default::default()
    };
    let result = run_study(&[spec], &options)?;
    print!("{}", result.summary_table());

    for r in &result.reports {
        if let Some(stab) = r.stab {
            println!("{:<14} selection stability (Jaccard) {stab:.3}", r.method.label());
        }
    }
    println!("{} curve grids kept", result.curves.len());
    Ok(())
}

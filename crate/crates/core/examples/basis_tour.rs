//! Builds a cubic basis and checks the properties the solver relies on:
//! partition of unity, centered functions integrating to zero, and the rank
//! of the roughness matrix.

use tvselect::quadrature::gauss_legendre_on;
use tvselect::{CenteredSplineBasis, KnotPlacement, SplineConfig};

fn main() -> tvselect::Result<()> {
    let config = SplineConfig::new(3, 4, KnotPlacement::EquallySpaced);
    let basis = CenteredSplineBasis::build(config, &[])?;
    println!("q = {}, knots = {:?}", basis.len(), basis.knots());

    let mut worst_sum = 0.0f64;
    for i in 0..=100 {
        let t = i as f64 / 100.0;
        let s: f64 = basis.eval_raw(t)?.iter().sum();
        worst_sum = worst_sum.max((s - 1.0).abs());
    }
    println!("max |sum_l B_l(t) - 1| on a 101-point grid: {worst_sum:.2e}");

    let breaks = basis.breakpoints();
    for l in 0..basis.len() {
        // 4-point Gauss-Legendre is exact for cubics on each knot span
        let integral: f64 = breaks
            .windows(2)
            .flat_map(|w| gauss_legendre_on(4, w[0], w[1]))
            .map(|(t, w)| w * basis.eval_centered(t).unwrap()[l])
            .sum();
        println!("  integral of centered B_{l}: {integral:+.2e}");
    }

    let omega = basis.roughness();
    println!("roughness eigenvalues: {:?}", omega.eigenvalues());
    println!("numerical rank {} (q - 2 = {})", omega.numerical_rank(1e-10), basis.len() - 2);

    let quantile = SplineConfig::new(3, 3, KnotPlacement::TimeQuantiles);
    let times: Vec<f64> = (0..50).map(|i| (i as f64 / 49.0).powi(2)).collect();
    let skewed = CenteredSplineBasis::build(quantile, &times)?;
    println!("quantile knots for skewed times: {:?}", skewed.internal_knots());
    Ok(())
}

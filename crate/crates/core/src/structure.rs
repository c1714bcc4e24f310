//! Three-way structural partition of the covariates.
//!
//! A covariate is time-varying when its deviation block is nonzero. Among
//! the rest, `|μ̂_k| > τ` marks a constant effect and anything else a null
//! effect, with `τ = c·√(log p / n)`. Classification always uses the fit's
//! own (standardized) covariate scale.

use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::solver::ModelFit;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EffectClass {
    Zero,
    Constant,
    Varying,
}

/// Disjoint index sets (0-based) covering `0..p`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StructuralPartition {
    pub s_vary: BTreeSet<usize>,
    pub s_const: BTreeSet<usize>,
    pub s_zero: BTreeSet<usize>,
    pub threshold_used: f64,
}

impl StructuralPartition {
    pub fn p(&self) -> usize {
        self.s_vary.len() + self.s_const.len() + self.s_zero.len()
    }

    pub fn class_of(&self, k: usize) -> Option<EffectClass> {
        if self.s_vary.contains(&k) {
            Some(EffectClass::Varying)
        } else if self.s_const.contains(&k) {
            Some(EffectClass::Constant)
        } else if self.s_zero.contains(&k) {
            Some(EffectClass::Zero)
        } else {
            None
        }
    }

    pub fn labels(&self) -> Vec<EffectClass> {
        (0..self.p())
            .map(|k| self.class_of(k).expect("partition covers 0..p"))
            .collect()
    }

    pub fn from_labels(labels: &[EffectClass], threshold_used: f64) -> Self {
        let pick = |c: EffectClass| {
            labels
                .iter()
                .enumerate()
                .filter(|(_, &l)| l == c)
                .map(|(k, _)| k)
                .collect()
        };
        Self {
            s_vary: pick(EffectClass::Varying),
            s_const: pick(EffectClass::Constant),
            s_zero: pick(EffectClass::Zero),
            threshold_used,
        }
    }
}

/// `{k : ‖θ̂_k‖₂ > 0}`.
pub fn select_vary(fit: &ModelFit) -> BTreeSet<usize> {
    fit.theta
        .iter()
        .enumerate()
        .filter(|(_, t)| t.iter().any(|&v| v != 0.0))
        .map(|(k, _)| k)
        .collect()
}

/// `τ = c·√(log p / n)`; zero when `p = 1`.
pub fn threshold(n: usize, p: usize, multiplier: f64) -> f64 {
    multiplier * ((p as f64).ln() / n as f64).sqrt()
}

/// Classifies every covariate using the strict rule `|μ̂_k| > τ` for
/// constant effects. `n` is the total number of observations.
pub fn classify(fit: &ModelFit, n: usize, p: usize, multiplier: f64) -> Result<StructuralPartition> {
    if n < 2 {
        return Err(Error::Config(format!("classification needs n >= 2, got {n}")));
    }
    if p == 0 {
        return Err(Error::Config("classification needs p >= 1".into()));
    }
    if p != fit.p() {
        return Err(Error::DimensionMismatch {
            what: "covariates to classify",
            expected: fit.p(),
            got: p,
        });
    }
    if !(multiplier >= 0.0) {
        return Err(Error::Config("threshold multiplier must be non-negative".into()));
    }
    let tau = threshold(n, p, multiplier);
    let vary = select_vary(fit);
    let labels: Vec<EffectClass> = (0..p)
        .map(|k| {
            if vary.contains(&k) {
                EffectClass::Varying
            } else if fit.mu[k].abs() > tau {
                EffectClass::Constant
            } else {
                EffectClass::Zero
            }
        })
        .collect();
    Ok(StructuralPartition::from_labels(&labels, tau))
}

/// Number of covariates whose estimated class differs from the truth.
pub fn misclassification_count(estimated: &StructuralPartition, truth: &StructuralPartition) -> usize {
    estimated
        .labels()
        .iter()
        .zip(truth.labels())
        .filter(|(a, b)| *a != b)
        .count()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::basis::{CenteredSplineBasis, SplineConfig};
    use crate::solver::{fit_bcd, Method, PenaltyConfig, SolverOptions};
    use crate::testutil::random_design;
    use nalgebra::DVector;
    use proptest::prelude::*;

    fn fit_with(mu: Vec<f64>, nonzero: &[usize]) -> ModelFit {
        let basis = CenteredSplineBasis::build(SplineConfig::cubic(6).unwrap(), &[]).unwrap();
        let p = mu.len();
        let mut fit = ModelFit::zeros(p, &basis, Method::TvSelect, PenaltyConfig::new(0.1, 0.1));
        fit.mu = DVector::from_vec(mu);
        for &k in nonzero {
            fit.theta[k][2] = 0.5;
        }
        fit
    }

    #[test]
    fn threshold_value() {
        let tau = threshold(500, 100, 1.0);
        assert!((tau - 0.095_970_5).abs() < 1e-6, "{tau}");
        assert_eq!(threshold(10, 1, 1.0), 0.0);
    }

    #[test]
    fn selection_sets() {
        let none = fit_with(vec![0.0; 4], &[]);
        assert!(select_vary(&none).is_empty());
        let some = fit_with(vec![0.0; 4], &[0, 2]);
        assert_eq!(select_vary(&some), BTreeSet::from([0, 2]));
    }

    #[test]
    fn boundary_is_zero_class() {
        let tau = threshold(50, 4, 1.0);
        let fit = fit_with(vec![tau, -tau, tau * 1.000001, 0.0], &[3]);
        let part = classify(&fit, 50, 4, 1.0).unwrap();
        assert_eq!(part.s_zero, BTreeSet::from([0, 1]));
        assert_eq!(part.s_const, BTreeSet::from([2]));
        assert_eq!(part.s_vary, BTreeSet::from([3]));
        assert_eq!(part.threshold_used, tau);
    }

    #[test]
    fn all_zero_fit_is_all_zero_class() {
        let fit = fit_with(vec![0.0; 5], &[]);
        let part = classify(&fit, 20, 5, 1.0).unwrap();
        assert_eq!(part.s_zero.len(), 5);
    }

    #[test]
    fn single_covariate_any_nonzero_mu_is_constant() {
        let fit = fit_with(vec![1e-9], &[]);
        let part = classify(&fit, 20, 1, 1.0).unwrap();
        assert_eq!(part.s_const, BTreeSet::from([0]));
    }

    #[test]
    fn invalid_inputs() {
        let fit = fit_with(vec![0.0; 3], &[]);
        assert!(classify(&fit, 1, 3, 1.0).is_err());
        assert!(classify(&fit, 10, 4, 1.0).is_err());
    }

    #[test]
    fn vary_set_matches_solver_zero_log() {
        for seed in 0..5 {
            let (design, basis) = random_design(15, 4, 5, 6, 200 + seed);
            let fit = fit_bcd(&design, &basis, &PenaltyConfig::new(0.08, 0.01), &SolverOptions::default()).unwrap();
            let from_log: BTreeSet<usize> = (0..5).filter(|&k| !fit.zeroed_in_final_sweep[k]).collect();
            assert_eq!(select_vary(&fit), from_log);
        }
    }

    proptest! {
        #[test]
        fn partition_and_threshold_monotonicity(
            mu in prop::collection::vec(-1.0f64..1.0, 1..12),
            mask in prop::collection::vec(any::<bool>(), 12),
            c1 in 0.0f64..3.0,
            dc in 0.0f64..3.0,
        ) {
            let p = mu.len();
            let nonzero: Vec<usize> = (0..p).filter(|&k| mask[k]).collect();
            let fit = fit_with(mu, &nonzero);
            let lo = classify(&fit, 40, p, c1).unwrap();
            let hi = classify(&fit, 40, p, c1 + dc).unwrap();
            prop_assert_eq!(lo.p(), p);
            prop_assert!(lo.s_vary.is_disjoint(&lo.s_const) && lo.s_const.is_disjoint(&lo.s_zero));
            // raising the threshold never moves zero -> const
            for k in &lo.s_zero {
                prop_assert!(!hi.s_const.contains(k));
            }
        }
    }
}

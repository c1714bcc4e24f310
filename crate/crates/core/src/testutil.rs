//! Small random instances for unit tests.

use nalgebra::DVector;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::basis::{CenteredSplineBasis, SplineConfig};
use crate::data::{DesignBlocks, LongitudinalDataset, SubjectRecord};

/// `subjects × obs` rows, `p` time-varying Gaussian covariates, cubic basis of
/// size `q`, response with one varying and one constant effect plus noise.
pub fn random_dataset(subjects: usize, obs: usize, p: usize, seed: u64) -> LongitudinalDataset {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let records = (0..subjects)
        .map(|i| {
            let mut times: Vec<f64> = (0..obs).map(|_| rng.gen::<f64>()).collect();
            times.sort_by(|a, b| a.total_cmp(b));
            let covariates: Vec<Vec<f64>> = (0..obs)
                .map(|_| (0..p).map(|_| rng.sample::<f64, _>(StandardNormal)).collect())
                .collect();
            let responses = times
                .iter()
                .zip(&covariates)
                .map(|(t, x)| {
                    let mut y = 0.3 + rng.sample::<f64, _>(StandardNormal) * 0.5;
                    y += x[0] * (2.0 * std::f64::consts::PI * t).sin();
                    if p > 1 {
                        y += x[1];
                    }
                    y
                })
                .collect();
            SubjectRecord {
                subject_id: format!("s{i}"),
                times,
                responses,
                covariates,
            }
        })
        .collect();
    let names = (1..=p).map(|k| format!("x{k}")).collect();
    LongitudinalDataset::new(records, names).unwrap()
}

pub fn random_design(subjects: usize, obs: usize, p: usize, q: usize, seed: u64) -> (DesignBlocks, CenteredSplineBasis) {
    let data = random_dataset(subjects, obs, p, seed);
    let basis = CenteredSplineBasis::build(SplineConfig::cubic(q).unwrap(), &[]).unwrap();
    let design = data.build_design(&basis).unwrap();
    (design, basis)
}

#[allow(dead_code)]
pub fn dvec(v: &[f64]) -> DVector<f64> {
    DVector::from_row_slice(v)
}

use nalgebra::{DMatrix, DVector, SymmetricEigen};

use super::{
    constants_only_fit, group_soft_threshold, penalty_value, BlockUpdate, Damping, Method, ModelFit,
    PenaltyConfig, RidgeFactor, SolverOptions,
};
use crate::basis::CenteredSplineBasis;
use crate::data::DesignBlocks;
use crate::error::{Error, Result};

const RESIDUAL_REFRESH_SWEEPS: usize = 50;
const MAX_HALVINGS: usize = 20;

/// Penalty-independent quantities of a design: `x_kᵀx_k` and the block Gram
/// matrices `G_k = Z_kᵀZ_k / n`. Shared read-only across grid points.
#[derive(Debug, Clone)]
pub struct BlockCache {
    xtx: Vec<f64>,
    gram: Vec<DMatrix<f64>>,
}

impl BlockCache {
    pub fn new(design: &DesignBlocks) -> Self {
        let n = design.n() as f64;
        Self {
            xtx: design.x.column_iter().map(|c| c.norm_squared()).collect(),
            gram: design.z.iter().map(|z| z.tr_mul(z) / n).collect(),
        }
    }

    pub fn gram(&self, k: usize) -> &DMatrix<f64> {
        &self.gram[k]
    }
}

/// Per-block solver for `min ½θᵀAθ − bᵀθ + λ₁‖θ‖` with `A = G_k + 2λ₂Ω`.
enum BlockSolver {
    Exact {
        vectors: DMatrix<f64>,
        values: Vec<f64>,
    },
    Ridge(RidgeFactor),
}

impl BlockSolver {
    fn new(k: usize, gram: &DMatrix<f64>, omega: &DMatrix<f64>, lambda2: f64, mode: BlockUpdate) -> Result<Self> {
        match mode {
            BlockUpdate::Exact => {
                let a = gram + omega * (2.0 * lambda2);
                let eig = SymmetricEigen::new(a);
                let max = eig.eigenvalues.iter().copied().fold(0.0, f64::max);
                let cutoff = 1e-12 * max;
                let values = eig
                    .eigenvalues
                    .iter()
                    .map(|&v| if v > cutoff { v } else { 0.0 })
                    .collect();
                Ok(BlockSolver::Exact {
                    vectors: eig.eigenvectors,
                    values,
                })
            }
            BlockUpdate::SmoothThenThreshold => Ok(BlockSolver::Ridge(RidgeFactor::new(k, gram, omega, lambda2)?)),
        }
    }

    fn solve(&self, b: &DVector<f64>, penalty: &PenaltyConfig) -> DVector<f64> {
        match self {
            BlockSolver::Exact { vectors, values } => exact_block_minimizer(vectors, values, b, penalty.lambda1),
            BlockSolver::Ridge(factor) => {
                let smoothed = factor.solve(b);
                group_soft_threshold(&smoothed, penalty.lambda1, penalty.epsilon_prox)
            }
        }
    }
}

/// Exact minimizer of `½θᵀAθ − bᵀθ + λ‖θ‖₂` given `A = V diag(values) Vᵀ`.
///
/// Zero iff `‖b‖ ≤ λ`. Otherwise `θ = (A + uI)⁺ b` where the multiplier
/// `u = λ/‖θ‖` solves `1/‖θ(u)‖ − u/λ = 0`. Directions with zero eigenvalue
/// carry no signal (`b` lies in the range of `A`) and get zero weight.
fn exact_block_minimizer(vectors: &DMatrix<f64>, values: &[f64], b: &DVector<f64>, lambda: f64) -> DVector<f64> {
    let q = b.len();
    if lambda > 0.0 && b.norm() <= lambda {
        return DVector::zeros(q);
    }
    let mut c = vectors.tr_mul(b);
    for (ci, &v) in c.iter_mut().zip(values) {
        if v == 0.0 {
            *ci = 0.0;
        }
    }
    let cnorm = c.norm();
    if cnorm == 0.0 || (lambda > 0.0 && cnorm <= lambda) {
        return DVector::zeros(q);
    }
    let u = if lambda == 0.0 {
        0.0
    } else {
        solve_multiplier(&c, values, lambda, cnorm)
    };
    let coords = DVector::from_fn(q, |i, _| {
        let den = values[i] + u;
        if c[i] == 0.0 || den == 0.0 {
            0.0
        } else {
            c[i] / den
        }
    });
    vectors * coords
}

fn solve_multiplier(c: &DVector<f64>, values: &[f64], lambda: f64, cnorm: f64) -> f64 {
    // F(u) = 1/‖θ(u)‖ − u/λ is concave, positive at 0 and negative beyond u_hi.
    let eval = |u: f64| -> (f64, f64) {
        let mut s2 = 0.0;
        let mut s3 = 0.0;
        for (ci, &v) in c.iter().zip(values) {
            if *ci == 0.0 {
                continue;
            }
            let den = v + u;
            s2 += ci * ci / (den * den);
            s3 += ci * ci / (den * den * den);
        }
        let norm = s2.sqrt();
        (1.0 / norm - u / lambda, s3 / (norm * norm * norm) - 1.0 / lambda)
    };
    let vmax = values
        .iter()
        .zip(c.iter())
        .filter(|(_, ci)| **ci != 0.0)
        .map(|(v, _)| *v)
        .fold(0.0, f64::max);
    let mut lo = 0.0;
    let mut hi = (vmax / cnorm) / (1.0 / lambda - 1.0 / cnorm);
    hi = hi * (1.0 + 1e-12) + f64::MIN_POSITIVE;
    let mut u = 0.5 * (lo + hi);
    for _ in 0..200 {
        let (f, df) = eval(u);
        if f > 0.0 {
            lo = u;
        } else {
            hi = u;
        }
        if f.abs() <= 1e-15 * (1.0 / lambda) * u.max(f64::MIN_POSITIVE) || hi - lo <= 1e-15 * hi {
            break;
        }
        let newton = u - f / df;
        u = if df < 0.0 && newton > lo && newton < hi {
            newton
        } else {
            0.5 * (lo + hi)
        };
    }
    u
}

/// Fits the doubly penalized model by block coordinate descent, starting from
/// `θ = 0` and constants-only least squares for `μ`.
pub fn fit_bcd(
    design: &DesignBlocks,
    basis: &CenteredSplineBasis,
    penalty: &PenaltyConfig,
    options: &SolverOptions,
) -> Result<ModelFit> {
    let cache = BlockCache::new(design);
    fit_bcd_warm(design, basis, penalty, options, &cache, None)
}

/// As [`fit_bcd`], reusing precomputed Gram matrices and optionally starting
/// from a previous fit (warm start along a penalty path).
pub fn fit_bcd_warm(
    design: &DesignBlocks,
    basis: &CenteredSplineBasis,
    penalty: &PenaltyConfig,
    options: &SolverOptions,
    cache: &BlockCache,
    start: Option<&ModelFit>,
) -> Result<ModelFit> {
    run_bcd(design, basis, penalty, options, cache, start, None, Method::TvSelect)
}

/// Core sweep loop. `active` restricts which deviation blocks may be nonzero.
#[allow(clippy::too_many_arguments)]
pub(crate) fn run_bcd(
    design: &DesignBlocks,
    basis: &CenteredSplineBasis,
    penalty: &PenaltyConfig,
    options: &SolverOptions,
    cache: &BlockCache,
    start: Option<&ModelFit>,
    active: Option<&[bool]>,
    method: Method,
) -> Result<ModelFit> {
    penalty.validate()?;
    options.validate()?;
    let n = design.n();
    let p = design.p();
    let q = basis.len();
    if design.q() != q {
        return Err(Error::DimensionMismatch {
            what: "basis size",
            expected: q,
            got: design.q(),
        });
    }
    if let Some(k) = cache.xtx.iter().position(|&v| !(v > 0.0)) {
        return Err(Error::DegenerateColumn(format!("column {}", k + 1)));
    }
    let intercept = options.intercept && design.intercept_included;
    let omega = basis.omega();
    let nf = n as f64;
    let is_active = |k: usize| active.map_or(true, |a| a[k]);

    let solvers = (0..p)
        .map(|k| {
            if is_active(k) {
                BlockSolver::new(k, &cache.gram[k], omega, penalty.lambda2, options.block_update).map(Some)
            } else {
                Ok(None)
            }
        })
        .collect::<Result<Vec<_>>>()?;

    let (mut beta0, mut mu, mut theta) = match start {
        Some(s) if s.p() == p && s.q() == q => {
            let theta: Vec<DVector<f64>> = s
                .theta
                .iter()
                .enumerate()
                .map(|(k, t)| if is_active(k) { t.clone() } else { DVector::zeros(q) })
                .collect();
            (if intercept { s.beta0 } else { 0.0 }, s.mu.clone(), theta)
        }
        _ => {
            let (b0, mu) = constants_only_fit(design, intercept)?;
            (b0, mu, vec![DVector::zeros(q); p])
        }
    };

    let full_residual = |beta0: f64, mu: &DVector<f64>, theta: &[DVector<f64>]| {
        &design.y - design.linear_predictor(beta0, mu, theta)
    };
    let mut r = full_residual(beta0, &mu, &theta);
    if intercept {
        let shift = r.mean();
        beta0 += shift;
        r.add_scalar_mut(-shift);
    }
    let objective_of = |r: &DVector<f64>, theta: &[DVector<f64>]| {
        r.norm_squared() / (2.0 * nf) + penalty_value(theta, omega, penalty)
    };
    let mut q_prev = objective_of(&r, &theta);
    let mut trace = vec![q_prev];
    let mut converged = false;
    let mut iterations = 0;
    let mut zeroed = vec![false; p];

    for sweep in 0..options.max_iter {
        iterations = sweep + 1;
        if intercept {
            let shift = r.mean();
            beta0 += shift;
            r.add_scalar_mut(-shift);
        }
        for k in 0..p {
            let xk = design.x.column(k);
            let new = mu[k] + xk.dot(&r) / cache.xtx[k];
            let delta = new - mu[k];
            if delta != 0.0 {
                r.axpy(-delta, &xk, 1.0);
                mu[k] = new;
            }
        }
        for k in 0..p {
            let Some(solver) = &solvers[k] else {
                zeroed[k] = true;
                continue;
            };
            let zk = &design.z[k];
            let gk = &cache.gram[k];
            let old = theta[k].clone();
            // Z_kᵀ r⁽ᵏ⁾ / n with r⁽ᵏ⁾ = r + Z_k θ_k
            let b = zk.tr_mul(&r) / nf + gk * &old;
            let mut new = solver.solve(&b, penalty);
            if options.damping == Damping::Halving {
                let a = |t: &DVector<f64>| {
                    let mut v = 0.5 * t.dot(&(gk * t)) - b.dot(t) + penalty.lambda1 * t.norm();
                    if penalty.lambda2 != 0.0 {
                        v += penalty.lambda2 * t.dot(&(omega * t));
                    }
                    v
                };
                let base = a(&old);
                let slack = 1e-13 * (1.0 + base.abs());
                let mut halvings = 0;
                while a(&new) > base + slack {
                    if halvings == MAX_HALVINGS {
                        new = old.clone();
                        break;
                    }
                    new = (&new + &old) * 0.5;
                    halvings += 1;
                }
            }
            zeroed[k] = new.iter().all(|&v| v == 0.0);
            let step = &new - &old;
            if step.iter().any(|&v| v != 0.0) {
                r -= zk * step;
                theta[k] = new;
            }
        }
        if (sweep + 1) % RESIDUAL_REFRESH_SWEEPS == 0 {
            r = full_residual(beta0, &mu, &theta);
        }
        let q_new = objective_of(&r, &theta);
        trace.push(q_new);
        let rel = (q_new - q_prev).abs() / (1.0 + q_prev);
        q_prev = q_new;
        if rel < options.tol {
            converged = true;
            break;
        }
    }

    Ok(ModelFit {
        beta0,
        mu,
        theta,
        objective_trace: trace,
        iterations,
        converged,
        method,
        penalty: *penalty,
        basis: basis.clone(),
        zeroed_in_final_sweep: zeroed,
        intercept,
    })
}

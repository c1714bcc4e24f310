//! Comparison estimators sharing the TV-Select basis and loss.

use nalgebra::{DMatrix, DVector};

use super::bcd::{run_bcd, BlockCache};
use super::{objective, Method, ModelFit, PenaltyConfig, SolverOptions};
use crate::basis::CenteredSplineBasis;
use crate::data::DesignBlocks;
use crate::error::{Error, Result};

/// Mild roughness penalty used in the Screen+Refit refit.
pub const REFIT_LAMBDA2: f64 = 1e-4;

/// Fits any of the four methods. `penalty` supplies whichever of `λ₁`/`λ₂`
/// the method uses; the other is forced to zero (VC-Ridge: `λ₁ = 0`;
/// Group-Lasso and the Screen+Refit screen: `λ₂ = 0`).
pub fn fit_method(
    design: &DesignBlocks,
    basis: &CenteredSplineBasis,
    method: Method,
    penalty: &PenaltyConfig,
    options: &SolverOptions,
) -> Result<ModelFit> {
    let cache = BlockCache::new(design);
    fit_method_cached(design, basis, method, penalty, options, &cache, None)
}

/// Baseline estimators; `method` must not be [`Method::TvSelect`].
pub fn fit_baseline(
    design: &DesignBlocks,
    basis: &CenteredSplineBasis,
    method: Method,
    penalty: &PenaltyConfig,
    options: &SolverOptions,
) -> Result<ModelFit> {
    if method == Method::TvSelect {
        return Err(Error::Config("fit_baseline expects a baseline method".into()));
    }
    fit_method(design, basis, method, penalty, options)
}

/// Penalty actually used by `method` given the requested `(λ₁, λ₂)`.
pub fn effective_penalty(method: Method, penalty: &PenaltyConfig) -> PenaltyConfig {
    match method {
        Method::TvSelect => *penalty,
        Method::VcRidge => PenaltyConfig {
            lambda1: 0.0,
            ..*penalty
        },
        Method::GroupLasso | Method::ScreenRefit => PenaltyConfig {
            lambda2: 0.0,
            ..*penalty
        },
    }
}

#[allow(clippy::too_many_arguments)]
pub(crate) fn fit_method_cached(
    design: &DesignBlocks,
    basis: &CenteredSplineBasis,
    method: Method,
    penalty: &PenaltyConfig,
    options: &SolverOptions,
    cache: &BlockCache,
    start: Option<&ModelFit>,
) -> Result<ModelFit> {
    let pen = effective_penalty(method, penalty);
    match method {
        Method::TvSelect | Method::VcRidge | Method::GroupLasso => {
            run_bcd(design, basis, &pen, options, cache, start, None, method)
        }
        Method::ScreenRefit => {
            let screen = run_bcd(design, basis, &pen, options, cache, start, None, Method::GroupLasso)?;
            let selected: Vec<bool> = screen.theta.iter().map(|t| t.iter().any(|&v| v != 0.0)).collect();
            let mut fit = refit(design, basis, &selected, REFIT_LAMBDA2, options.intercept)?;
            fit.iterations = screen.iterations;
            fit.converged = screen.converged;
            Ok(fit)
        }
    }
}

/// Penalized least squares over all constant effects and the selected
/// deviation blocks, solved directly:
/// `min (1/2n)‖y − β₀1 − Xμ − Σ_{k∈S} Z_kθ_k‖² + λ₂ Σ_{k∈S} θ_kᵀΩθ_k`.
///
/// The solution is the minimum-norm one, so the null direction shared by
/// every centered block (the all-ones vector) carries zero weight.
pub fn refit(
    design: &DesignBlocks,
    basis: &CenteredSplineBasis,
    selected: &[bool],
    lambda2: f64,
    intercept: bool,
) -> Result<ModelFit> {
    let n = design.n();
    let p = design.p();
    let q = basis.len();
    if selected.len() != p {
        return Err(Error::DimensionMismatch {
            what: "screened blocks",
            expected: p,
            got: selected.len(),
        });
    }
    let intercept = intercept && design.intercept_included;
    let blocks: Vec<usize> = (0..p).filter(|&k| selected[k]).collect();
    let off = usize::from(intercept);
    let dim = off + p + q * blocks.len();

    let mut d = DMatrix::zeros(n, dim);
    if intercept {
        d.column_mut(0).fill(1.0);
    }
    d.columns_mut(off, p).copy_from(&design.x);
    for (j, &k) in blocks.iter().enumerate() {
        d.columns_mut(off + p + j * q, q).copy_from(&design.z[k]);
    }
    let nf = n as f64;
    let mut lhs = d.tr_mul(&d) / nf;
    for j in 0..blocks.len() {
        let s = off + p + j * q;
        let mut view = lhs.view_mut((s, s), (q, q));
        view += basis.omega() * (2.0 * lambda2);
    }
    let rhs = d.tr_mul(&design.y) / nf;
    let max = lhs.diagonal().iter().copied().fold(0.0, f64::max);
    let svd = lhs.svd(true, true);
    let sol = svd
        .solve(&rhs, 1e-12 * max.max(f64::MIN_POSITIVE))
        .map_err(|e| Error::DegenerateDesign(format!("refit system: {e}")))?;

    let penalty = PenaltyConfig::new(0.0, lambda2);
    let mut fit = ModelFit::zeros(p, basis, Method::ScreenRefit, penalty);
    fit.intercept = intercept;
    fit.beta0 = if intercept { sol[0] } else { 0.0 };
    fit.mu = DVector::from_iterator(p, sol.iter().skip(off).take(p).copied());
    for (j, &k) in blocks.iter().enumerate() {
        fit.theta[k] = DVector::from_iterator(q, sol.iter().skip(off + p + j * q).take(q).copied());
    }
    fit.zeroed_in_final_sweep = selected.iter().map(|s| !s).collect();
    fit.objective_trace = vec![objective(design, &fit)?];
    fit.iterations = 1;
    fit.converged = true;
    Ok(fit)
}

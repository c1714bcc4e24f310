//! Doubly penalized least squares for the varying-coefficient model
//!
//! ```text
//! Q(β₀, μ, θ) = (1/2n)‖y − β₀1 − Xμ − Σ_k Z_k θ_k‖² + λ₁ Σ_k ‖θ_k‖₂ + λ₂ Σ_k θ_kᵀ Ω θ_k
//! ```
//!
//! [`fit_bcd`] is the production solver (block coordinate descent),
//! [`fit_baseline`] provides the comparison estimators and [`fit_oracle`] is
//! an independent proximal-gradient solver used to certify BCD results.

mod baseline;
mod bcd;
mod oracle;

use nalgebra::{Cholesky, DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::basis::CenteredSplineBasis;
use crate::data::DesignBlocks;
use crate::error::{Error, Result};

pub use baseline::{effective_penalty, fit_baseline, fit_method, refit, REFIT_LAMBDA2};
pub(crate) use baseline::fit_method_cached;
pub use bcd::{fit_bcd, fit_bcd_warm, BlockCache};
pub use oracle::{fit_oracle, OracleOptions};

/// Default `ε` added to the block norm inside the group soft-threshold.
pub const DEFAULT_EPSILON_PROX: f64 = 1e-8;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PenaltyConfig {
    pub lambda1: f64,
    pub lambda2: f64,
    #[serde(default = "default_epsilon")]
    pub epsilon_prox: f64,
}

fn default_epsilon() -> f64 {
    DEFAULT_EPSILON_PROX
}

impl PenaltyConfig {
    pub fn new(lambda1: f64, lambda2: f64) -> Self {
        Self {
            lambda1,
            lambda2,
            epsilon_prox: DEFAULT_EPSILON_PROX,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.lambda1 >= 0.0 && self.lambda1.is_finite()) {
            return Err(Error::Config(format!("lambda1 must be >= 0, got {}", self.lambda1)));
        }
        if !(self.lambda2 >= 0.0 && self.lambda2.is_finite()) {
            return Err(Error::Config(format!("lambda2 must be >= 0, got {}", self.lambda2)));
        }
        if !(self.epsilon_prox > 0.0) {
            return Err(Error::Config("epsilon_prox must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Damping {
    None,
    /// Halve an objective-increasing block step toward the previous value,
    /// up to 20 times, then revert.
    #[default]
    Halving,
}

/// How a deviation block is updated inside a sweep.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum BlockUpdate {
    /// Exact minimizer of the block subproblem: zero when
    /// `‖Z_kᵀr⁽ᵏ⁾/n‖ ≤ λ₁`, otherwise a one-dimensional secular equation on
    /// the eigenbasis of `G_k + 2λ₂Ω`.
    #[default]
    Exact,
    /// Ridge smoothing step followed by group soft-thresholding of the ridge
    /// solution. Cheaper, but its fixed points are not minimizers of `Q`
    /// unless `G_k + 2λ₂Ω` is a multiple of the identity.
    SmoothThenThreshold,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SolverOptions {
    /// Stop when `|Q⁽ᵗ⁺¹⁾ − Q⁽ᵗ⁾| / (1 + Q⁽ᵗ⁾)` falls below this.
    pub tol: f64,
    pub max_iter: usize,
    pub damping: Damping,
    /// Estimate an intercept (only honored when the design carries one).
    pub intercept: bool,
    pub block_update: BlockUpdate,
}

impl Default for SolverOptions {
    fn default() -> Self {
        Self {
            tol: 1e-6,
            max_iter: 500,
            damping: Damping::Halving,
            intercept: true,
            block_update: BlockUpdate::Exact,
        }
    }
}

impl SolverOptions {
    pub fn validate(&self) -> Result<()> {
        if !(self.tol > 0.0) {
            return Err(Error::Config("solver tolerance must be positive".into()));
        }
        if self.max_iter == 0 {
            return Err(Error::Config("max_iter must be at least 1".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize, PartialOrd, Ord)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    TvSelect,
    VcRidge,
    GroupLasso,
    ScreenRefit,
}

impl Method {
    pub const ALL: [Method; 4] = [
        Method::TvSelect,
        Method::VcRidge,
        Method::GroupLasso,
        Method::ScreenRefit,
    ];

    pub fn label(&self) -> &'static str {
        match self {
            Method::TvSelect => "TV-Select",
            Method::VcRidge => "VC-Ridge",
            Method::GroupLasso => "Group-Lasso",
            Method::ScreenRefit => "Screen+Refit",
        }
    }
}

impl std::str::FromStr for Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let norm: String = s
            .chars()
            .filter(|c| c.is_ascii_alphanumeric())
            .collect::<String>()
            .to_ascii_lowercase();
        match norm.as_str() {
            "tvselect" => Ok(Method::TvSelect),
            "vcridge" => Ok(Method::VcRidge),
            "grouplasso" => Ok(Method::GroupLasso),
            "screenrefit" => Ok(Method::ScreenRefit),
            _ => Err(Error::Config(format!("unknown method `{s}`"))),
        }
    }
}

impl std::fmt::Display for Method {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.label())
    }
}

/// Estimated coefficients and solver diagnostics.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelFit {
    pub beta0: f64,
    pub mu: DVector<f64>,
    pub theta: Vec<DVector<f64>>,
    /// `Q⁽⁰⁾` followed by the objective after every sweep.
    pub objective_trace: Vec<f64>,
    pub iterations: usize,
    pub converged: bool,
    pub method: Method,
    pub penalty: PenaltyConfig,
    pub basis: CenteredSplineBasis,
    /// Blocks set to exact zero by the selection step of the final sweep.
    pub zeroed_in_final_sweep: Vec<bool>,
    pub intercept: bool,
}

impl ModelFit {
    /// All-zero coefficients for a design with `p` blocks.
    pub fn zeros(p: usize, basis: &CenteredSplineBasis, method: Method, penalty: PenaltyConfig) -> Self {
        Self {
            beta0: 0.0,
            mu: DVector::zeros(p),
            theta: vec![DVector::zeros(basis.len()); p],
            objective_trace: Vec::new(),
            iterations: 0,
            converged: false,
            method,
            penalty,
            basis: basis.clone(),
            zeroed_in_final_sweep: vec![false; p],
            intercept: false,
        }
    }

    pub fn p(&self) -> usize {
        self.mu.len()
    }

    pub fn q(&self) -> usize {
        self.basis.len()
    }

    pub fn final_objective(&self) -> Option<f64> {
        self.objective_trace.last().copied()
    }

    /// `β̂_k(t) = μ̂_k + B̃(t)ᵀθ̂_k`.
    pub fn beta_curve(&self, k: usize, t: f64) -> Result<f64> {
        Ok(self.mu[k] + self.basis.curve(&self.theta[k], t)?)
    }

    pub fn fitted_values(&self, design: &DesignBlocks) -> DVector<f64> {
        design.linear_predictor(self.beta0, &self.mu, &self.theta)
    }

    pub fn residuals(&self, design: &DesignBlocks) -> DVector<f64> {
        &design.y - self.fitted_values(design)
    }

    pub fn rss(&self, design: &DesignBlocks) -> f64 {
        self.residuals(design).norm_squared()
    }
}

/// `Q(Θ)` with loss scaled by `1/(2n)`.
pub fn objective(design: &DesignBlocks, fit: &ModelFit) -> Result<f64> {
    check_dims(design, fit)?;
    let n = design.n() as f64;
    let loss = fit.rss(design) / (2.0 * n);
    Ok(loss + penalty_value(&fit.theta, fit.basis.omega(), &fit.penalty))
}

pub(crate) fn penalty_value(theta: &[DVector<f64>], omega: &DMatrix<f64>, penalty: &PenaltyConfig) -> f64 {
    theta
        .iter()
        .map(|t| {
            let mut v = penalty.lambda1 * t.norm();
            if penalty.lambda2 != 0.0 {
                v += penalty.lambda2 * t.dot(&(omega * t));
            }
            v
        })
        .sum()
}

fn check_dims(design: &DesignBlocks, fit: &ModelFit) -> Result<()> {
    if design.p() != fit.p() {
        return Err(Error::DimensionMismatch {
            what: "number of covariates",
            expected: design.p(),
            got: fit.p(),
        });
    }
    if design.q() != fit.q() || fit.theta.iter().any(|t| t.len() != fit.q()) {
        return Err(Error::DimensionMismatch {
            what: "basis size",
            expected: design.q(),
            got: fit.q(),
        });
    }
    Ok(())
}

/// Least-squares intercept given the remaining components:
/// the mean of `y − Xμ − Σ Z_k θ_k`.
pub fn update_intercept(design: &DesignBlocks, mu: &DVector<f64>, theta: &[DVector<f64>]) -> f64 {
    let r = &design.y - design.linear_predictor(0.0, mu, theta);
    r.mean()
}

/// `μ_k = x_kᵀ r / x_kᵀ x_k` for the partial residual `r` that excludes
/// covariate `k`'s constant effect.
pub fn update_mu_k(k: usize, partial_residual: &DVector<f64>, x_k: &DVector<f64>) -> Result<f64> {
    let xtx = x_k.norm_squared();
    if !(xtx > 0.0) {
        return Err(Error::DegenerateColumn(format!("column {}", k + 1)));
    }
    Ok(x_k.dot(partial_residual) / xtx)
}

/// `S(v, λ) = (1 − λ/(‖v‖₂ + ε))₊ v`, returning the exact zero vector whenever
/// the scale factor is not positive.
pub fn group_soft_threshold(v: &DVector<f64>, lambda1: f64, epsilon_prox: f64) -> DVector<f64> {
    if lambda1 == 0.0 {
        return v.clone();
    }
    let scale = 1.0 - lambda1 / (v.norm() + epsilon_prox);
    if scale <= 0.0 {
        DVector::zeros(v.len())
    } else {
        v * scale
    }
}

/// Cholesky factor of `G_k + 2λ₂Ω` for the ridge smoothing step, built once
/// per block and reused across sweeps.
#[derive(Debug, Clone)]
pub struct RidgeFactor {
    chol: Cholesky<f64, nalgebra::Dyn>,
    jitter: f64,
}

impl RidgeFactor {
    /// Factorizes `gram + 2·lambda2·omega`, adding `δI` with
    /// `δ = 1e-10·trace/q` when the matrix is not numerically positive definite.
    pub fn new(block: usize, gram: &DMatrix<f64>, omega: &DMatrix<f64>, lambda2: f64) -> Result<Self> {
        let q = gram.nrows();
        let a = gram + omega * (2.0 * lambda2);
        let max_diag = a.diagonal().iter().copied().fold(0.0, f64::max);
        if let Some(chol) = well_conditioned_cholesky(&a, max_diag) {
            return Ok(Self { chol, jitter: 0.0 });
        }
        let trace = a.trace();
        let delta = if trace > 0.0 { 1e-10 * trace / q as f64 } else { 1e-10 };
        let jittered = &a + DMatrix::identity(q, q) * delta;
        Cholesky::new(jittered)
            .map(|chol| Self { chol, jitter: delta })
            .ok_or(Error::SingularBlock(block))
    }

    pub fn jitter(&self) -> f64 {
        self.jitter
    }

    /// Solves `(G_k + 2λ₂Ω) θ = rhs`.
    pub fn solve(&self, rhs: &DVector<f64>) -> DVector<f64> {
        self.chol.solve(rhs)
    }
}

fn well_conditioned_cholesky(a: &DMatrix<f64>, max_diag: f64) -> Option<Cholesky<f64, nalgebra::Dyn>> {
    let chol = Cholesky::new(a.clone())?;
    let l = chol.l_dirty();
    let min_pivot = (0..a.nrows()).map(|i| l[(i, i)] * l[(i, i)]).fold(f64::INFINITY, f64::min);
    (min_pivot > 1e-12 * max_diag.max(f64::MIN_POSITIVE)).then_some(chol)
}

/// Ridge smoothing step
/// `θ̃_k = (Z_kᵀZ_k/n + 2λ₂Ω)⁻¹ (Z_kᵀ r⁽ᵏ⁾ / n)`.
pub fn ridge_smooth(z_k: &DMatrix<f64>, partial_residual: &DVector<f64>, factor: &RidgeFactor) -> DVector<f64> {
    let n = z_k.nrows() as f64;
    let rhs = z_k.tr_mul(partial_residual) / n;
    factor.solve(&rhs)
}

/// `β̂₀ + Σ_k x_k (μ̂_k + B̃(t)ᵀθ̂_k)` for one observation on the model's
/// preprocessing scale.
pub fn predict(fit: &ModelFit, x: &[f64], t: f64) -> Result<f64> {
    if x.len() != fit.p() {
        return Err(Error::DimensionMismatch {
            what: "covariates for prediction",
            expected: fit.p(),
            got: x.len(),
        });
    }
    let b = fit.basis.eval_centered(t)?;
    Ok(fit.beta0
        + x.iter()
            .enumerate()
            .map(|(k, xk)| xk * (fit.mu[k] + b.dot(&fit.theta[k])))
            .sum::<f64>())
}

/// Constants-only least squares: `(β₀, μ)` from `y ~ 1 + X` (no intercept
/// column when `intercept` is false). Adds a `1e-10` ridge when the normal
/// equations are singular.
pub fn constants_only_fit(design: &DesignBlocks, intercept: bool) -> Result<(f64, DVector<f64>)> {
    let n = design.n();
    let p = design.p();
    let off = usize::from(intercept);
    let d = DMatrix::from_fn(n, p + off, |i, j| {
        if intercept && j == 0 {
            1.0
        } else {
            design.x[(i, j - off)]
        }
    });
    let mut gram = d.tr_mul(&d);
    let rhs = d.tr_mul(&design.y);
    let max_diag = gram.diagonal().iter().copied().fold(0.0, f64::max);
    let sol = match well_conditioned_cholesky(&gram, max_diag) {
        Some(ch) => ch.solve(&rhs),
        None => {
            gram += DMatrix::identity(p + off, p + off) * 1e-10 * max_diag.max(1.0);
            Cholesky::new(gram)
                .ok_or_else(|| Error::DegenerateDesign("constants-only normal equations are singular".into()))?
                .solve(&rhs)
        }
    };
    let beta0 = if intercept { sol[0] } else { 0.0 };
    let mu = DVector::from_iterator(p, sol.iter().skip(off).copied());
    Ok((beta0, mu))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::basis::SplineConfig;
    use crate::testutil::random_design;
    use approx::assert_abs_diff_eq;
    use proptest::prelude::*;

    #[test]
    fn soft_threshold_cases() {
        let v = DVector::from_vec(vec![0.6, 0.8]);
        assert_eq!(group_soft_threshold(&v, 1.0 + 2e-8, 1e-8), DVector::zeros(2));
        assert!(group_soft_threshold(&v, 1.0, 1e-8).norm() > 0.0);
        assert_eq!(group_soft_threshold(&v, 2.0, 1e-8), DVector::zeros(2));
        assert_eq!(group_soft_threshold(&v, 0.0, 1e-8), v);
        let w = DVector::from_vec(vec![1.0, 2.0, 2.0]);
        let out = group_soft_threshold(&w, 1.0, 0.0);
        for (a, b) in out.iter().zip(w.iter()) {
            assert_abs_diff_eq!(*a, b * 2.0 / 3.0, epsilon = 1e-15);
        }
    }

    proptest! {
        #[test]
        fn soft_threshold_is_nonexpansive(
            u in prop::collection::vec(-5.0f64..5.0, 6),
            v in prop::collection::vec(-5.0f64..5.0, 6),
            lambda in 0.0f64..4.0,
        ) {
            let u = DVector::from_vec(u);
            let v = DVector::from_vec(v);
            let su = group_soft_threshold(&u, lambda, 0.0);
            let sv = group_soft_threshold(&v, lambda, 0.0);
            prop_assert!((su - sv).norm() <= (u - v).norm() + 1e-12);
        }
    }

    #[test]
    fn mu_update_cases() {
        let x = DVector::from_vec(vec![1.0, 2.0, -1.0]);
        assert_abs_diff_eq!(update_mu_k(0, &x, &x).unwrap(), 1.0, epsilon = 1e-15);
        let perp = DVector::from_vec(vec![2.0, -1.0, 0.0]);
        assert_abs_diff_eq!(update_mu_k(0, &perp, &x).unwrap(), 0.0, epsilon = 1e-15);
        let r = DVector::from_vec(vec![0.3, 1.7, -2.2]);
        // scalar normal equation (xᵀx) μ = xᵀr written out
        let expected = (0.3 * 1.0 + 1.7 * 2.0 + 2.2) / (1.0 + 4.0 + 1.0);
        assert_abs_diff_eq!(update_mu_k(0, &r, &x).unwrap(), expected, epsilon = 1e-15);
        assert!(matches!(
            update_mu_k(2, &r, &DVector::zeros(3)),
            Err(Error::DegenerateColumn(_))
        ));
    }

    #[test]
    fn intercept_update_cases() {
        let (mut design, _) = random_design(5, 4, 2, 6, 11);
        let p = design.p();
        let q = design.q();
        design.y = DVector::from_element(design.n(), 3.0);
        let zero_mu = DVector::zeros(p);
        let zero_theta = vec![DVector::zeros(q); p];
        assert_abs_diff_eq!(update_intercept(&design, &zero_mu, &zero_theta), 3.0, epsilon = 1e-14);

        design.y.iter_mut().enumerate().for_each(|(i, v)| *v = (i as f64).sin());
        let mu = DVector::from_vec(vec![0.4, -0.2]);
        let theta = vec![DVector::from_element(q, 0.1), DVector::from_fn(q, |i, _| i as f64 * 0.05)];
        let mut direct = 0.0;
        for i in 0..design.n() {
            let mut fit = 0.0;
            for k in 0..p {
                fit += design.x[(i, k)] * mu[k];
                for l in 0..q {
                    fit += design.z[k][(i, l)] * theta[k][l];
                }
            }
            direct += design.y[i] - fit;
        }
        direct /= design.n() as f64;
        assert_abs_diff_eq!(update_intercept(&design, &mu, &theta), direct, epsilon = 1e-13);
    }

    #[test]
    fn ridge_smooth_cases() {
        let (design, basis) = random_design(8, 5, 2, 6, 3);
        let n = design.n() as f64;
        let z = &design.z[0];
        let gram = z.tr_mul(z) / n;
        for lambda2 in [0.0, 0.01, 1.0] {
            let f = RidgeFactor::new(0, &gram, basis.omega(), lambda2).unwrap();
            let zero = ridge_smooth(z, &DVector::zeros(design.n()), &f);
            assert!(zero.iter().all(|&v| v == 0.0));
            let r = DVector::from_fn(design.n(), |i, _| ((i * 13 % 7) as f64 - 3.0) * 0.3);
            let th = ridge_smooth(z, &r, &f);
            let lhs = (&gram + basis.omega() * (2.0 * lambda2) + DMatrix::identity(6, 6) * f.jitter()) * &th;
            let rhs = z.tr_mul(&r) / n;
            assert!((lhs - rhs).norm() < 1e-10);
        }
    }

    #[test]
    fn ridge_smooth_identity_gram() {
        // Z with orthonormal columns scaled by √n: G = I.
        let n = 16;
        let q = 4;
        let z = DMatrix::from_fn(n, q, |i, j| {
            let h = [1.0, -1.0];
            // Walsh-like ±1 columns, mutually orthogonal
            let bit = (i >> j) & 1;
            h[bit]
        });
        let gram = z.tr_mul(&z) / n as f64;
        assert!((&gram - DMatrix::identity(q, q)).norm() < 1e-14);
        let omega = DMatrix::zeros(q, q);
        let f = RidgeFactor::new(0, &gram, &omega, 0.0).unwrap();
        let r = DVector::from_fn(n, |i, _| i as f64 * 0.1);
        let th = ridge_smooth(&z, &r, &f);
        assert!((th - z.tr_mul(&r) / n as f64).norm() < 1e-13);
    }

    #[test]
    fn objective_matches_straight_line_formula() {
        let (design, basis) = random_design(6, 4, 3, 6, 5);
        let p = design.p();
        let q = design.q();
        let mut fit = ModelFit::zeros(p, &basis, Method::TvSelect, PenaltyConfig::new(0.0, 0.0));
        let y2: f64 = design.y.iter().map(|v| v * v).sum();
        assert_abs_diff_eq!(objective(&design, &fit).unwrap(), y2 / (2.0 * design.n() as f64), epsilon = 1e-14);

        fit.penalty = PenaltyConfig::new(0.3, 0.7);
        fit.beta0 = 0.25;
        fit.mu = DVector::from_vec(vec![0.5, -1.0, 0.2]);
        fit.theta = (0..p).map(|k| DVector::from_fn(q, |l, _| ((k + 2 * l) as f64).cos())).collect();
        // independent evaluation, element by element
        let mut rss = 0.0;
        for i in 0..design.n() {
            let mut eta = fit.beta0;
            for k in 0..p {
                eta += design.x[(i, k)] * fit.mu[k];
                for l in 0..q {
                    eta += design.z[k][(i, l)] * fit.theta[k][l];
                }
            }
            rss += (design.y[i] - eta).powi(2);
        }
        let mut pen = 0.0;
        for k in 0..p {
            let norm: f64 = fit.theta[k].iter().map(|v| v * v).sum::<f64>().sqrt();
            let mut quad = 0.0;
            for a in 0..q {
                for b in 0..q {
                    quad += fit.theta[k][a] * basis.omega()[(a, b)] * fit.theta[k][b];
                }
            }
            pen += 0.3 * norm + 0.7 * quad;
        }
        let expected = rss / (2.0 * design.n() as f64) + pen;
        let got = objective(&design, &fit).unwrap();
        assert!((got - expected).abs() <= 1e-12 * expected.abs().max(1.0));

        let wrong = ModelFit::zeros(p + 1, &basis, Method::TvSelect, fit.penalty);
        assert!(objective(&design, &wrong).is_err());
    }

    #[test]
    fn predict_cases() {
        let basis = CenteredSplineBasis::build(SplineConfig::cubic(6).unwrap(), &[]).unwrap();
        let mut fit = ModelFit::zeros(2, &basis, Method::TvSelect, PenaltyConfig::new(0.1, 0.1));
        fit.beta0 = 1.5;
        fit.mu = DVector::from_vec(vec![2.0, -3.0]);
        assert_eq!(predict(&fit, &[0.0, 0.0], 0.3).unwrap(), 1.5);
        assert_abs_diff_eq!(predict(&fit, &[1.0, 2.0], 0.3).unwrap(), 1.5 + 2.0 - 6.0, epsilon = 1e-15);
        assert!(matches!(predict(&fit, &[1.0, 2.0], 1.2), Err(Error::Domain(_))));
        assert!(predict(&fit, &[1.0], 0.2).is_err());
    }

    #[test]
    fn method_names_parse() {
        for m in Method::ALL {
            assert_eq!(m.label().parse::<Method>().unwrap(), m);
        }
        assert!("lasso".parse::<Method>().is_err());
    }
}

//! Clamped B-spline basis on `[0, 1]`, its centered variant and the
//! second-derivative roughness matrix.
//!
//! The centered functions are `B̃_ℓ(t) = B_ℓ(t) - ∫₀¹ B_ℓ`, so every function
//! `t ↦ B̃(t)ᵀθ` integrates to zero over `[0, 1]`. Because centering only
//! subtracts constants, the roughness matrix of the centered basis equals the
//! Gram matrix of raw second derivatives.

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::quadrature::gauss_legendre_on;

/// Largest supported spline degree.
pub const MAX_DEGREE: usize = 10;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum KnotPlacement {
    #[default]
    EquallySpaced,
    TimeQuantiles,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplineConfig {
    pub degree: usize,
    pub num_internal_knots: usize,
    #[serde(default)]
    pub knot_placement: KnotPlacement,
}

impl SplineConfig {
    pub fn new(degree: usize, num_internal_knots: usize, knot_placement: KnotPlacement) -> Self {
        Self {
            degree,
            num_internal_knots,
            knot_placement,
        }
    }

    /// Cubic basis with `q` functions and equally spaced interior knots.
    pub fn cubic(q: usize) -> Result<Self> {
        if q < 4 {
            return Err(Error::Config(format!(
                "a cubic basis needs at least 4 functions, got q={q}"
            )));
        }
        Ok(Self::new(3, q - 4, KnotPlacement::EquallySpaced))
    }

    /// Number of basis functions, `K + d + 1`.
    pub fn num_basis(&self) -> usize {
        self.num_internal_knots + self.degree + 1
    }

    pub fn validate(&self) -> Result<()> {
        if self.degree > MAX_DEGREE {
            return Err(Error::Config(format!(
                "spline degree {} exceeds the supported maximum {MAX_DEGREE}",
                self.degree
            )));
        }
        if self.num_internal_knots > 1000 {
            return Err(Error::Config(format!(
                "{} interior knots is not a sensible basis size",
                self.num_internal_knots
            )));
        }
        Ok(())
    }
}

impl Default for SplineConfig {
    fn default() -> Self {
        Self::new(3, 4, KnotPlacement::EquallySpaced)
    }
}

/// Gram matrix `Ω = ∫₀¹ B̃''(t) B̃''(t)ᵀ dt`.
#[derive(Debug, Clone, PartialEq)]
pub struct RoughnessMatrix {
    omega: DMatrix<f64>,
}

impl RoughnessMatrix {
    pub fn matrix(&self) -> &DMatrix<f64> {
        &self.omega
    }

    pub fn dim(&self) -> usize {
        self.omega.nrows()
    }

    pub fn quadratic_form(&self, v: &DVector<f64>) -> Result<f64> {
        if v.len() != self.dim() {
            return Err(Error::DimensionMismatch {
                what: "roughness quadratic form",
                expected: self.dim(),
                got: v.len(),
            });
        }
        Ok(v.dot(&(&self.omega * v)))
    }

    /// Eigenvalues in ascending order.
    pub fn eigenvalues(&self) -> Vec<f64> {
        let mut ev: Vec<f64> = SymmetricEigen::new(self.omega.clone())
            .eigenvalues
            .iter()
            .copied()
            .collect();
        ev.sort_by(|a, b| a.total_cmp(b));
        ev
    }

    /// Number of eigenvalues above `rel_tol` times the largest one.
    pub fn numerical_rank(&self, rel_tol: f64) -> usize {
        let ev = self.eigenvalues();
        let max = ev.last().copied().unwrap_or(0.0).max(0.0);
        if max == 0.0 {
            return 0;
        }
        ev.iter().filter(|&&e| e > rel_tol * max).count()
    }
}

/// B-spline basis with clamped boundary knots, precomputed basis means and
/// roughness matrix. Immutable after construction.
#[derive(Debug, Clone, PartialEq)]
pub struct CenteredSplineBasis {
    config: SplineConfig,
    knots: Vec<f64>,
    basis_means: Vec<f64>,
    roughness: RoughnessMatrix,
}

impl CenteredSplineBasis {
    /// Builds the basis. `observed_times` is only consulted for
    /// [`KnotPlacement::TimeQuantiles`].
    pub fn build(config: SplineConfig, observed_times: &[f64]) -> Result<Self> {
        config.validate()?;
        if let Some(&t) = observed_times
            .iter()
            .find(|t| !(0.0..=1.0).contains(*t))
        {
            return Err(Error::Domain(t));
        }
        let internal = match config.knot_placement {
            KnotPlacement::EquallySpaced => {
                let k = config.num_internal_knots;
                (1..=k).map(|j| j as f64 / (k + 1) as f64).collect()
            }
            KnotPlacement::TimeQuantiles => {
                quantile_knots(observed_times, config.num_internal_knots)?
            }
        };
        Self::with_internal_knots(config, &internal)
    }

    /// Builds the basis from explicit interior knots (used when reloading a
    /// saved fit).
    pub fn with_internal_knots(config: SplineConfig, internal: &[f64]) -> Result<Self> {
        config.validate()?;
        if internal.len() != config.num_internal_knots {
            return Err(Error::DimensionMismatch {
                what: "interior knots",
                expected: config.num_internal_knots,
                got: internal.len(),
            });
        }
        let strictly_inside = internal.iter().all(|&k| k > 0.0 && k < 1.0);
        let increasing = internal.windows(2).all(|w| w[0] < w[1]);
        if !strictly_inside || !increasing {
            return Err(Error::Config(
                "interior knots must be strictly increasing and strictly inside (0, 1)".into(),
            ));
        }
        let d = config.degree;
        let mut knots = Vec::with_capacity(internal.len() + 2 * (d + 1));
        knots.extend(std::iter::repeat(0.0).take(d + 1));
        knots.extend_from_slice(internal);
        knots.extend(std::iter::repeat(1.0).take(d + 1));

        let mut basis = Self {
            config,
            knots,
            basis_means: Vec::new(),
            roughness: RoughnessMatrix {
                omega: DMatrix::zeros(0, 0),
            },
        };
        basis.basis_means = basis.integrate_raw(d + 1);
        basis.roughness = basis.roughness_with_order(d + 1);
        Ok(basis)
    }

    pub fn config(&self) -> &SplineConfig {
        &self.config
    }

    pub fn degree(&self) -> usize {
        self.config.degree
    }

    /// Number of basis functions `q`.
    pub fn len(&self) -> usize {
        self.config.num_basis()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Full clamped knot vector (boundary knots repeated `d + 1` times).
    pub fn knots(&self) -> &[f64] {
        &self.knots
    }

    pub fn internal_knots(&self) -> &[f64] {
        let d = self.config.degree;
        &self.knots[d + 1..self.knots.len() - d - 1]
    }

    /// `B̄_ℓ = ∫₀¹ B_ℓ(u) du`.
    pub fn basis_means(&self) -> &[f64] {
        &self.basis_means
    }

    pub fn roughness(&self) -> &RoughnessMatrix {
        &self.roughness
    }

    pub fn omega(&self) -> &DMatrix<f64> {
        &self.roughness.omega
    }

    /// Distinct knot values delimiting the polynomial pieces.
    pub fn breakpoints(&self) -> Vec<f64> {
        let mut b: Vec<f64> = Vec::with_capacity(self.config.num_internal_knots + 2);
        for &k in &self.knots {
            if b.last().map_or(true, |&last| k > last) {
                b.push(k);
            }
        }
        b
    }

    /// Raw basis `B(t)`.
    pub fn eval_raw(&self, t: f64) -> Result<DVector<f64>> {
        check_time(t)?;
        Ok(DVector::from_vec(self.derivative_values(t, 0)))
    }

    /// Centered basis `B̃(t) = B(t) - B̄`.
    pub fn eval_centered(&self, t: f64) -> Result<DVector<f64>> {
        check_time(t)?;
        let mut v = self.derivative_values(t, 0);
        for (x, m) in v.iter_mut().zip(&self.basis_means) {
            *x -= m;
        }
        Ok(DVector::from_vec(v))
    }

    /// `r`-th derivative of the basis at `t` (identical for raw and centered
    /// bases when `r ≥ 1`).
    pub fn eval_derivative(&self, t: f64, order: usize) -> Result<DVector<f64>> {
        check_time(t)?;
        Ok(DVector::from_vec(self.derivative_values(t, order)))
    }

    /// `g(t) = B̃(t)ᵀθ`.
    pub fn curve(&self, theta: &DVector<f64>, t: f64) -> Result<f64> {
        self.check_len(theta)?;
        Ok(self.eval_centered(t)?.dot(theta))
    }

    /// `g''(t)` for `g = B̃ᵀθ`.
    pub fn curve_second_derivative(&self, theta: &DVector<f64>, t: f64) -> Result<f64> {
        self.check_len(theta)?;
        Ok(self.eval_derivative(t, 2)?.dot(theta))
    }

    /// `vᵀΩv`, the integrated squared second derivative of `B̃ᵀv`.
    pub fn roughness_quadratic_form(&self, v: &DVector<f64>) -> Result<f64> {
        self.roughness.quadratic_form(v)
    }

    /// Largest Euclidean norm of `B̃(t)` over `[0, 1]`, approximated on the
    /// knots plus a fine grid.
    pub fn max_centered_norm(&self) -> f64 {
        (0..=2000)
            .map(|i| i as f64 / 2000.0)
            .chain(self.knots.iter().copied())
            .map(|t| self.eval_centered(t).map(|v| v.norm()).unwrap_or(0.0))
            .fold(0.0, f64::max)
    }

    /// Roughness matrix computed with an `order`-point Gauss–Legendre rule on
    /// every knot interval.
    pub fn roughness_with_order(&self, order: usize) -> RoughnessMatrix {
        let q = self.len();
        let mut omega = DMatrix::zeros(q, q);
        if self.config.degree >= 2 {
            for (a, b) in self.intervals() {
                for (t, w) in gauss_legendre_on(order, a, b) {
                    let d2 = DVector::from_vec(self.derivative_values(t, 2));
                    omega.ger(w, &d2, &d2, 1.0);
                }
            }
            // exact symmetry
            omega = (&omega + omega.transpose()) * 0.5;
        }
        RoughnessMatrix { omega }
    }

    fn integrate_raw(&self, order: usize) -> Vec<f64> {
        let mut means = vec![0.0; self.len()];
        for (a, b) in self.intervals() {
            for (t, w) in gauss_legendre_on(order, a, b) {
                for (m, v) in means.iter_mut().zip(self.derivative_values(t, 0)) {
                    *m += w * v;
                }
            }
        }
        means
    }

    fn intervals(&self) -> Vec<(f64, f64)> {
        self.breakpoints()
            .windows(2)
            .map(|w| (w[0], w[1]))
            .collect()
    }

    fn check_len(&self, v: &DVector<f64>) -> Result<()> {
        if v.len() != self.len() {
            return Err(Error::DimensionMismatch {
                what: "spline coefficients",
                expected: self.len(),
                got: v.len(),
            });
        }
        Ok(())
    }

    /// Index `s` of the non-degenerate knot span `[t_s, t_{s+1})` containing
    /// `t`; `t = 1` belongs to the last span.
    fn span(&self, t: f64) -> usize {
        let q = self.len();
        let d = self.config.degree;
        let mut s = d;
        while s + 1 < q && self.knots[s + 1] <= t {
            s += 1;
        }
        s
    }

    /// Derivative of order `order` of every degree-`d` basis function at `t`.
    ///
    /// Degree-`(d - order)` values come from the Cox–de Boor recursion and are
    /// lifted with `B'_{i,p} = p/(t_{i+p}-t_i) B_{i,p-1} - p/(t_{i+p+1}-t_{i+1}) B_{i+1,p-1}`.
    fn derivative_values(&self, t: f64, order: usize) -> Vec<f64> {
        let d = self.config.degree;
        let q = self.len();
        if order > d {
            return vec![0.0; q];
        }
        let knots = &self.knots;
        let m = knots.len();
        let base_degree = d - order;
        let s = self.span(t);

        // degree 0 on the full knot vector: m - 1 functions
        let mut vals = vec![0.0; m - 1];
        vals[s] = 1.0;
        for e in 1..=base_degree {
            let len = m - 1 - e;
            let mut next = vec![0.0; len];
            for (i, out) in next.iter_mut().enumerate() {
                let mut acc = 0.0;
                let den_l = knots[i + e] - knots[i];
                if den_l > 0.0 {
                    acc += (t - knots[i]) / den_l * vals[i];
                }
                let den_r = knots[i + e + 1] - knots[i + 1];
                if den_r > 0.0 {
                    acc += (knots[i + e + 1] - t) / den_r * vals[i + 1];
                }
                *out = acc;
            }
            vals = next;
        }
        for e in base_degree..d {
            let p = (e + 1) as f64;
            let len = m - 2 - e;
            let mut next = vec![0.0; len];
            for (i, out) in next.iter_mut().enumerate() {
                let mut acc = 0.0;
                let den_l = knots[i + e + 1] - knots[i];
                if den_l > 0.0 {
                    acc += p / den_l * vals[i];
                }
                let den_r = knots[i + e + 2] - knots[i + 1];
                if den_r > 0.0 {
                    acc -= p / den_r * vals[i + 1];
                }
                *out = acc;
            }
            vals = next;
        }
        debug_assert_eq!(vals.len(), q);
        vals
    }
}

fn check_time(t: f64) -> Result<()> {
    if (0.0..=1.0).contains(&t) {
        Ok(())
    } else {
        Err(Error::Domain(t))
    }
}

/// Interior knots at the `j/(K+1)` empirical quantiles of the observed times.
fn quantile_knots(times: &[f64], k: usize) -> Result<Vec<f64>> {
    if k == 0 {
        return Ok(Vec::new());
    }
    let mut sorted: Vec<f64> = times.to_vec();
    sorted.sort_by(|a, b| a.total_cmp(b));
    let mut distinct = sorted.clone();
    distinct.dedup();
    if sorted.is_empty() || distinct.len() < k {
        return Err(Error::DegenerateDesign(format!(
            "quantile knots need at least {k} distinct observation times, found {}",
            distinct.len()
        )));
    }
    let n = sorted.len();
    let knots: Vec<f64> = (1..=k)
        .map(|j| {
            let h = (n - 1) as f64 * j as f64 / (k + 1) as f64;
            let lo = h.floor() as usize;
            let hi = (lo + 1).min(n - 1);
            sorted[lo] + (h - lo as f64) * (sorted[hi] - sorted[lo])
        })
        .collect();
    let ok = knots.iter().all(|&x| x > 0.0 && x < 1.0) && knots.windows(2).all(|w| w[0] < w[1]);
    if !ok {
        return Err(Error::DegenerateDesign(format!(
            "observation-time quantiles do not give {k} distinct interior knots"
        )));
    }
    Ok(knots)
}

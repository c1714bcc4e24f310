//! Accelerated proximal gradient on the full parameter vector. Slow but
//! independent of the block-coordinate machinery; used to certify BCD fits on
//! small problems.

use nalgebra::{DMatrix, DVector};

use super::{penalty_value, Method, ModelFit, PenaltyConfig};
use crate::basis::CenteredSplineBasis;
use crate::data::DesignBlocks;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct OracleOptions {
    /// Stop once the relative objective change drops below this and the
    /// gradient mapping is small.
    pub tol: f64,
    pub max_iter: usize,
    pub intercept: bool,
}

impl Default for OracleOptions {
    fn default() -> Self {
        Self {
            tol: 1e-10,
            max_iter: 200_000,
            intercept: true,
        }
    }
}

struct Layout {
    off: usize,
    p: usize,
    q: usize,
}

impl Layout {
    fn block(&self, k: usize) -> std::ops::Range<usize> {
        let s = self.off + self.p + k * self.q;
        s..s + self.q
    }
}

/// Minimizes the same objective as [`fit_bcd`](super::fit_bcd) by FISTA with
/// backtracking on the smooth part (loss + roughness) and the exact group
/// `ℓ₂` proximal map, with function-value restarts.
const POLISH_EVERY: usize = 250;

/// Subgradient optimality residual: gradient norm on free coordinates and
/// active blocks, excess of `‖∇_θk‖` over `λ₁` on zero blocks.
fn kkt_residual(
    d: &DMatrix<f64>,
    y: &DVector<f64>,
    omega: &DMatrix<f64>,
    layout: &Layout,
    lambda1: f64,
    lambda2: f64,
    w: &DVector<f64>,
) -> f64 {
    let n = d.nrows() as f64;
    let r = y - d * w;
    let g = -d.tr_mul(&r) / n;
    let mut worst = g.rows(0, layout.off + layout.p).amax();
    for k in 0..layout.p {
        let rg = layout.block(k);
        let t = w.rows(rg.start, layout.q);
        let gk = g.rows(rg.start, layout.q) + omega * t * (2.0 * lambda2);
        let nt = t.norm();
        let res = if nt > 0.0 {
            (gk + t * (lambda1 / nt)).norm()
        } else {
            (gk.norm() - lambda1).max(0.0)
        };
        worst = worst.max(res);
    }
    worst
}

/// Damped Newton on the support identified by the first-order iterations,
/// where the objective is smooth. Returns the polished point when it
/// satisfies the optimality conditions to `kkt_tol`.
#[allow(clippy::too_many_arguments)]
fn polish(
    d: &DMatrix<f64>,
    y: &DVector<f64>,
    omega: &DMatrix<f64>,
    layout: &Layout,
    lambda1: f64,
    lambda2: f64,
    start: &DVector<f64>,
    kkt_tol: f64,
) -> Option<DVector<f64>> {
    let n = d.nrows() as f64;
    let q = layout.q;
    let active: Vec<usize> = (0..layout.p)
        .filter(|&k| start.rows(layout.block(k).start, q).norm() > 0.0)
        .collect();
    let mut idx: Vec<usize> = (0..layout.off + layout.p).collect();
    for &k in &active {
        idx.extend(layout.block(k));
    }
    let m = idx.len();
    let da = d.select_columns(&idx);
    let dtd = da.tr_mul(&da) / n;
    let dty = da.tr_mul(y) / n;
    let free = layout.off + layout.p;
    let value = |v: &DVector<f64>| -> f64 {
        let r = y - &da * v;
        let mut f = r.norm_squared() / (2.0 * n);
        for j in 0..active.len() {
            let t = v.rows(free + j * q, q);
            f += lambda2 * (omega * t).dot(&t) + lambda1 * t.norm();
        }
        f
    };
    let mut v = DVector::from_iterator(m, idx.iter().map(|&i| start[i]));
    let mut fv = value(&v);
    for _ in 0..60 {
        let mut g = &dtd * &v - &dty;
        let mut h = dtd.clone();
        for j in 0..active.len() {
            let s = free + j * q;
            let t = v.rows(s, q).into_owned();
            let nt = t.norm();
            if nt == 0.0 {
                return None;
            }
            let mut gk = g.rows_mut(s, q);
            gk += omega * &t * (2.0 * lambda2) + &t * (lambda1 / nt);
            let mut hk = h.view_mut((s, s), (q, q));
            hk += omega * (2.0 * lambda2);
            hk += (DMatrix::identity(q, q) - &t * t.transpose() / (nt * nt)) * (lambda1 / nt);
        }
        if g.amax() < 1e-3 * kkt_tol {
            break;
        }
        let maxdiag = h.diagonal().amax().max(f64::MIN_POSITIVE);
        let step = h.svd(true, true).solve(&g, 1e-13 * maxdiag).ok()?;
        let mut a = 1.0;
        let mut moved = false;
        for _ in 0..40 {
            let cand = &v - &step * a;
            let fc = value(&cand);
            if fc <= fv + 1e-15 * fv.abs() {
                v = cand;
                fv = fc;
                moved = true;
                break;
            }
            a *= 0.5;
        }
        if !moved {
            break;
        }
    }
    let mut w = DVector::zeros(start.len());
    for (j, &i) in idx.iter().enumerate() {
        w[i] = v[j];
    }
    (kkt_residual(d, y, omega, layout, lambda1, lambda2, &w) <= kkt_tol).then_some(w)
}

pub fn fit_oracle(
    design: &DesignBlocks,
    basis: &CenteredSplineBasis,
    penalty: &PenaltyConfig,
    options: &OracleOptions,
) -> Result<ModelFit> {
    penalty.validate()?;
    let n = design.n();
    let p = design.p();
    let q = basis.len();
    let intercept = options.intercept && design.intercept_included;
    let layout = Layout {
        off: usize::from(intercept),
        p,
        q,
    };
    let dim = layout.off + p + p * q;
    let mut d = DMatrix::zeros(n, dim);
    if intercept {
        d.column_mut(0).fill(1.0);
    }
    d.columns_mut(layout.off, p).copy_from(&design.x);
    for k in 0..p {
        d.columns_mut(layout.block(k).start, q).copy_from(&design.z[k]);
    }
    let nf = n as f64;
    let omega = basis.omega();
    let lambda1 = penalty.lambda1;
    let lambda2 = penalty.lambda2;

    let smooth = |w: &DVector<f64>| -> (f64, DVector<f64>) {
        let r = &design.y - &d * w;
        let mut f = r.norm_squared() / (2.0 * nf);
        let mut g = -d.tr_mul(&r) / nf;
        if lambda2 != 0.0 {
            for k in 0..p {
                let rg = layout.block(k);
                let t = w.rows(rg.start, q).into_owned();
                let ot = omega * &t;
                f += lambda2 * t.dot(&ot);
                let mut gk = g.rows_mut(rg.start, q);
                gk += ot * (2.0 * lambda2);
            }
        }
        (f, g)
    };
    let nonsmooth = |w: &DVector<f64>| -> f64 {
        (0..p).map(|k| lambda1 * w.rows(layout.block(k).start, q).norm()).sum()
    };
    let prox = |v: &mut DVector<f64>, step: f64| {
        let thr = step * lambda1;
        if thr == 0.0 {
            return;
        }
        for k in 0..p {
            let mut blk = v.rows_mut(layout.block(k).start, q);
            let nrm = blk.norm();
            if nrm <= thr {
                blk.fill(0.0);
            } else {
                blk *= 1.0 - thr / nrm;
            }
        }
    };

    let full_objective = |w: &DVector<f64>| smooth(w).0 + nonsmooth(w);
    let mut x = DVector::zeros(dim);
    let mut y = x.clone();
    let mut t: f64 = 1.0;
    let mut lip = 1.0;
    let mut obj = full_objective(&x);
    let mut trace = vec![obj];
    let mut iterations = 0;
    let mut converged = false;
    let scale = 1.0 + smooth(&x).1.norm();
    let kkt_tol = 1e-9 * scale;

    while iterations < options.max_iter {
        iterations += 1;
        let (fy, gy) = smooth(&y);
        let mut x_new;
        loop {
            x_new = &y - &gy * (1.0 / lip);
            prox(&mut x_new, 1.0 / lip);
            let diff = &x_new - &y;
            let (fx, _) = smooth(&x_new);
            if fx <= fy + gy.dot(&diff) + 0.5 * lip * diff.norm_squared() + 1e-15 * fy.abs() {
                break;
            }
            lip *= 2.0;
            if lip > 1e20 {
                return Err(Error::OracleNonConvergence(iterations));
            }
        }
        let grad_map = (&x_new - &y).norm() * lip;
        let obj_new = full_objective(&x_new);
        if obj_new > obj {
            if t == 1.0 {
                // a plain proximal step from x no longer decreases Q
                break;
            }
            // restart momentum from the current iterate
            t = 1.0;
            y = x.clone();
            continue;
        }
        let t_new = 0.5 * (1.0 + (1.0 + 4.0 * t * t).sqrt());
        y = &x_new + (&x_new - &x) * ((t - 1.0) / t_new);
        t = t_new;
        let rel = (obj - obj_new).abs() / (1.0 + obj.abs());
        x = x_new;
        obj = obj_new;
        trace.push(obj);
        if rel < options.tol && grad_map < kkt_tol {
            converged = true;
            break;
        }
        if iterations % POLISH_EVERY == 0 {
            if let Some(w) = polish(&d, &design.y, omega, &layout, lambda1, lambda2, &x, kkt_tol) {
                let ow = full_objective(&w);
                if ow <= obj + 1e-14 * (1.0 + obj.abs()) {
                    x = w;
                    obj = ow;
                    trace.push(obj);
                    converged = true;
                    break;
                }
            }
        }
    }
    if !converged {
        if let Some(w) = polish(&d, &design.y, omega, &layout, lambda1, lambda2, &x, kkt_tol) {
            if full_objective(&w) <= obj + 1e-14 * (1.0 + obj.abs()) {
                x = w;
                obj = full_objective(&x);
                trace.push(obj);
                converged = true;
            }
        }
        converged = converged || kkt_residual(&d, &design.y, omega, &layout, lambda1, lambda2, &x) <= kkt_tol;
    }
    if !converged {
        return Err(Error::OracleNonConvergence(iterations));
    }

    let mut fit = ModelFit::zeros(p, basis, Method::TvSelect, *penalty);
    fit.intercept = intercept;
    fit.beta0 = if intercept { x[0] } else { 0.0 };
    fit.mu = x.rows(layout.off, p).into_owned();
    for k in 0..p {
        fit.theta[k] = x.rows(layout.block(k).start, q).into_owned();
    }
    fit.zeroed_in_final_sweep = fit.theta.iter().map(|t| t.iter().all(|&v| v == 0.0)).collect();
    let final_obj = fit.rss(design) / (2.0 * nf) + penalty_value(&fit.theta, omega, penalty);
    trace.push(final_obj);
    fit.objective_trace = trace;
    fit.iterations = iterations;
    fit.converged = true;
    Ok(fit)
}

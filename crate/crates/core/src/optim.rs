//! Small numerical toolbox: Levenberg-Marquardt least squares, Brent's
//! scalar minimizer, bracketed root bisection and weighted linear least
//! squares.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy)]
pub struct LmConfig {
    pub max_iter: usize,
    /// Stop when the relative decrease of the cost falls below this.
    pub ftol: f64,
    /// Stop when the relative step size falls below this.
    pub xtol: f64,
    pub initial_lambda: f64,
}

impl Default for LmConfig {
    fn default() -> Self {
        LmConfig {
            max_iter: 200,
            ftol: 1e-15,
            xtol: 1e-13,
            initial_lambda: 1e-3,
        }
    }
}

#[derive(Debug, Clone)]
pub struct LmReport {
    pub params: Vec<f64>,
    /// Sum of squared residuals at `params`.
    pub cost: f64,
    pub iterations: usize,
    pub converged: bool,
    /// Jacobian of the residuals at `params`.
    pub jacobian: DMatrix<f64>,
    pub n_residuals: usize,
}

impl LmReport {
    /// Parameter covariance `(J^T J)^-1 * s^2`, with `s^2` the residual
    /// variance estimated from the fit when `scale_by_residuals` is set, or
    /// 1 when the residuals are already normalized by known sigmas.
    pub fn covariance(&self, scale_by_residuals: bool) -> Option<DMatrix<f64>> {
        let n = self.params.len();
        let jtj = self.jacobian.transpose() * &self.jacobian;
        let inv = jtj.try_inverse()?;
        if scale_by_residuals {
            let dof = self.n_residuals.saturating_sub(n).max(1) as f64;
            Some(inv * (self.cost / dof))
        } else {
            Some(inv)
        }
    }
}

fn numeric_jacobian<F>(f: &F, x: &[f64], m: usize) -> Option<DMatrix<f64>>
where
    F: Fn(&[f64], &mut [f64]) -> bool,
{
    let n = x.len();
    let mut jac = DMatrix::zeros(m, n);
    let mut xp = x.to_vec();
    let mut rp = vec![0.0; m];
    let mut rm = vec![0.0; m];
    for j in 0..n {
        let h = 1e-6 * x[j].abs().max(1.0);
        xp[j] = x[j] + h;
        if !f(&xp, &mut rp) {
            return None;
        }
        xp[j] = x[j] - h;
        if !f(&xp, &mut rm) {
            return None;
        }
        xp[j] = x[j];
        for i in 0..m {
            jac[(i, j)] = (rp[i] - rm[i]) / (2.0 * h);
        }
    }
    Some(jac)
}

/// Minimize `sum r_i(x)^2` from `x0`.
///
/// `residuals(x, out)` fills `out` (length `m`) and returns `false` when the
/// model cannot be evaluated at `x`; such steps are rejected. Parameters
/// should be scaled to order unity since the Jacobian is taken by central
/// differences with a step of `1e-6 * max(|x|, 1)`.
pub fn levenberg_marquardt<F>(residuals: F, x0: &[f64], m: usize, cfg: LmConfig) -> Result<LmReport>
where
    F: Fn(&[f64], &mut [f64]) -> bool,
{
    let n = x0.len();
    if m < n {
        return Err(Error::numerical(
            "least squares",
            format!("{m} residuals cannot determine {n} parameters"),
        ));
    }
    let mut x = x0.to_vec();
    let mut r = vec![0.0; m];
    if !residuals(&x, &mut r) {
        return Err(Error::numerical(
            "least squares",
            "model undefined at starting point",
        ));
    }
    let mut cost: f64 = r.iter().map(|v| v * v).sum();
    let mut lambda = cfg.initial_lambda;
    let mut converged = false;
    let mut iterations = 0;
    let mut r_trial = vec![0.0; m];

    'outer: while iterations < cfg.max_iter {
        iterations += 1;
        let jac = numeric_jacobian(&residuals, &x, m)
            .ok_or_else(|| Error::numerical("least squares", "Jacobian evaluation failed"))?;
        let rv = DVector::from_column_slice(&r);
        let grad = jac.transpose() * &rv;
        let jtj = jac.transpose() * &jac;
        let dmax = (0..n).map(|i| jtj[(i, i)]).fold(0.0_f64, f64::max);
        if dmax == 0.0 {
            converged = true;
            break;
        }
        if grad.amax() <= 1e-300 {
            converged = true;
            break;
        }
        loop {
            let mut a = jtj.clone();
            for i in 0..n {
                let d = jtj[(i, i)].max(1e-12 * dmax);
                a[(i, i)] += lambda * d;
            }
            let step = match a.cholesky() {
                Some(ch) => ch.solve(&(-&grad)),
                None => {
                    lambda *= 10.0;
                    if lambda > 1e16 {
                        break 'outer;
                    }
                    continue;
                }
            };
            let x_trial: Vec<f64> = x.iter().zip(step.iter()).map(|(a, b)| a + b).collect();
            let ok = residuals(&x_trial, &mut r_trial);
            let cost_trial: f64 = if ok {
                r_trial.iter().map(|v| v * v).sum()
            } else {
                f64::INFINITY
            };
            if cost_trial.is_finite() && cost_trial <= cost {
                let dcost = cost - cost_trial;
                let xnorm = x.iter().map(|v| v * v).sum::<f64>().sqrt();
                let snorm = step.norm();
                x = x_trial;
                std::mem::swap(&mut r, &mut r_trial);
                let prev = cost;
                cost = cost_trial;
                lambda = (lambda / 3.0).max(1e-15);
                if dcost <= cfg.ftol * prev || snorm <= cfg.xtol * (xnorm + cfg.xtol) || cost == 0.0
                {
                    converged = true;
                    break 'outer;
                }
                break;
            }
            lambda *= 4.0;
            if lambda > 1e16 {
                // no downhill step exists at machine precision: stationary point
                converged = true;
                break 'outer;
            }
        }
    }

    let jacobian = numeric_jacobian(&residuals, &x, m)
        .ok_or_else(|| Error::numerical("least squares", "Jacobian evaluation failed"))?;
    Ok(LmReport {
        params: x,
        cost,
        iterations,
        converged,
        jacobian,
        n_residuals: m,
    })
}

/// Brent's method for a scalar minimum inside `[a, b]`.
pub fn brent_minimize(
    f: impl Fn(f64) -> f64,
    a: f64,
    b: f64,
    tol: f64,
    max_iter: usize,
) -> (f64, f64) {
    const CGOLD: f64 = 0.381_966_011_250_105_1;
    let (mut a, mut b) = if a < b { (a, b) } else { (b, a) };
    let mut x = a + CGOLD * (b - a);
    let (mut w, mut v) = (x, x);
    let mut fx = f(x);
    let (mut fw, mut fv) = (fx, fx);
    let mut d: f64 = 0.0;
    let mut e: f64 = 0.0;
    for _ in 0..max_iter {
        let xm = 0.5 * (a + b);
        let tol1 = tol * x.abs() + 1e-300;
        let tol2 = 2.0 * tol1;
        if (x - xm).abs() <= tol2 - 0.5 * (b - a) {
            break;
        }
        let mut golden = true;
        if e.abs() > tol1 {
            let r = (x - w) * (fx - fv);
            let mut q = (x - v) * (fx - fw);
            let mut p = (x - v) * q - (x - w) * r;
            q = 2.0 * (q - r);
            if q > 0.0 {
                p = -p;
            }
            q = q.abs();
            let etemp = e;
            e = d;
            if p.abs() < (0.5 * q * etemp).abs() && p > q * (a - x) && p < q * (b - x) {
                d = p / q;
                let u = x + d;
                if u - a < tol2 || b - u < tol2 {
                    d = tol1.copysign(xm - x);
                }
                golden = false;
            }
        }
        if golden {
            e = if x >= xm { a - x } else { b - x };
            d = CGOLD * e;
        }
        let u = if d.abs() >= tol1 {
            x + d
        } else {
            x + tol1.copysign(d)
        };
        let fu = f(u);
        if fu <= fx {
            if u >= x {
                a = x;
            } else {
                b = x;
            }
            v = w;
            fv = fw;
            w = x;
            fw = fx;
            x = u;
            fx = fu;
        } else {
            if u < x {
                a = u;
            } else {
                b = u;
            }
            if fu <= fw || w == x {
                v = w;
                fv = fw;
                w = u;
                fw = fu;
            } else if fu <= fv || v == x || v == w {
                v = u;
                fv = fu;
            }
        }
    }
    (x, fx)
}

/// Root of `f` in `[lo, hi]` by bisection; `f(lo)` and `f(hi)` must differ in sign.
pub fn bisect_root(f: impl Fn(f64) -> f64, mut lo: f64, mut hi: f64) -> Option<f64> {
    let mut flo = f(lo);
    let fhi = f(hi);
    if flo == 0.0 {
        return Some(lo);
    }
    if fhi == 0.0 {
        return Some(hi);
    }
    if flo.signum() == fhi.signum() || !flo.is_finite() || !fhi.is_finite() {
        return None;
    }
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        if mid <= lo || mid >= hi {
            break;
        }
        let fm = f(mid);
        if fm == 0.0 {
            return Some(mid);
        }
        if fm.signum() == flo.signum() {
            lo = mid;
            flo = fm;
        } else {
            hi = mid;
        }
    }
    Some(0.5 * (lo + hi))
}

/// Weighted linear least squares solution with its covariance.
#[derive(Debug, Clone)]
pub struct LinearFit {
    pub beta: DVector<f64>,
    /// `(X^T W X)^-1`: the covariance when the weights are inverse variances.
    pub covariance: DMatrix<f64>,
    pub weighted_rss: f64,
}

/// Solve `min sum w_i (y_i - x_i . beta)^2`.
pub fn weighted_least_squares(x: &DMatrix<f64>, y: &[f64], w: &[f64]) -> Option<LinearFit> {
    let (m, n) = x.shape();
    if y.len() != m || w.len() != m || m < n {
        return None;
    }
    let mut xtwx: DMatrix<f64> = DMatrix::zeros(n, n);
    let mut xtwy: DVector<f64> = DVector::zeros(n);
    for i in 0..m {
        for a in 0..n {
            xtwy[a] += w[i] * x[(i, a)] * y[i];
            for b in 0..n {
                xtwx[(a, b)] += w[i] * x[(i, a)] * x[(i, b)];
            }
        }
    }
    // column scaling keeps the normal equations well conditioned
    let scale: Vec<f64> = (0..n)
        .map(|a| {
            let d = xtwx[(a, a)];
            if d > 0.0 {
                1.0 / d.sqrt()
            } else {
                1.0
            }
        })
        .collect();
    let mut scaled = xtwx.clone();
    for a in 0..n {
        for b in 0..n {
            scaled[(a, b)] *= scale[a] * scale[b];
        }
    }
    let eig = scaled.clone().symmetric_eigenvalues();
    let (emin, emax) = eig.iter().fold((f64::INFINITY, 0.0_f64), |(lo, hi), &e| {
        (lo.min(e), hi.max(e.abs()))
    });
    if !(emin > 1e-13 * emax) {
        return None;
    }
    let inv_scaled = scaled.try_inverse()?;
    let mut covariance = inv_scaled;
    for a in 0..n {
        for b in 0..n {
            covariance[(a, b)] *= scale[a] * scale[b];
        }
    }
    if covariance.iter().any(|v| !v.is_finite()) {
        return None;
    }
    let beta = &covariance * xtwy;
    let weighted_rss = (0..m)
        .map(|i| {
            let pred: f64 = (0..n).map(|a| x[(i, a)] * beta[a]).sum();
            w[i] * (y[i] - pred).powi(2)
        })
        .sum();
    Some(LinearFit {
        beta,
        covariance,
        weighted_rss,
    })
}

//! Resonance fitting: delay removal and renormalization, algebraic circle
//! fit, phase fit, and conversion of circle radius and loaded quality factor
//! into internal and coupling quality factors.
//!
//! The measured trace is modelled as `S_m(w) = s_inf e^{i w tau} R(w)` with
//! `R` the reflection or hanger circle model of [`circle_model`]. The pipeline
//! in [`fit_resonance`] runs
//!
//! 1. delay estimate from the wing phase slope;
//! 2. renormalization by the mean of the outermost samples;
//! 3. Taubin circle fit;
//! 4. phase fit of the centered points for `w_r`, `Q_l` and the phase offset;
//! 5. complex least-squares refinement of background, residual delay, `w_r`,
//!    `Q_l`, radius and mismatch rotation together, started from the
//!    algebraic estimates;
//! 6. `Q_c`, `Q_i` from radius and `Q_l`, and the radius error propagated to
//!    `1/Q_i`.

use std::f64::consts::PI;

use num_complex::Complex64;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::optim::{levenberg_marquardt, LmConfig};
use crate::types::{ComplexTrace, ProbeGeometry, ResonatorFit};

/// Minimum number of samples accepted by the resonance fit.
pub const MIN_FIT_SAMPLES: usize = 16;
/// Minimum number of points for a circle fit.
pub const MIN_CIRCLE_POINTS: usize = 8;
/// Fraction of samples on each side used for the delay regression.
pub const DELAY_WING_FRACTION: f64 = 0.2;
/// Fraction of all samples (split over both ends) averaged for `s_inf`.
pub const S_INF_FRACTION: f64 = 0.05;

/// Narrowest span, in loaded linewidths, in which a resonance is searched.
pub const MIN_SPAN_LINEWIDTHS: f64 = 6.0;

/// Samples used by the start-value grid search.
const PROJECTION_SAMPLES: usize = 256;

/// Adjacent phase steps closer than this to a half turn cannot be unwrapped
/// unambiguously.
const UNWRAP_LIMIT: f64 = 0.9 * PI;

/// Electrical delay and off-resonant reference removed from a raw trace.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NormalizationParams {
    /// Electrical delay, seconds.
    pub tau: f64,
    /// Off-resonant response `A e^{i alpha}`.
    pub s_inf: Complex64,
}

impl NormalizationParams {
    pub fn new(tau: f64, s_inf: Complex64) -> Result<Self> {
        if !tau.is_finite() {
            return Err(Error::invalid("normalization", "non-finite delay"));
        }
        if !(s_inf.norm() > 0.0 && s_inf.norm().is_finite()) {
            return Err(Error::invalid("normalization", "|s_inf| must be positive"));
        }
        Ok(NormalizationParams { tau, s_inf })
    }

    pub fn identity() -> Self {
        NormalizationParams {
            tau: 0.0,
            s_inf: Complex64::new(1.0, 0.0),
        }
    }
}

/// Reflection or hanger response
/// `1 - k (Q_l/Q_c) e^{i phi_0} / (1 + 2i Q_l (w/w_r - 1))`
/// with `k = 2` in reflection and `k = 1` in hanger geometry.
pub fn circle_model(
    omega: f64,
    omega_r: f64,
    q_l: f64,
    q_c: f64,
    phi_0: f64,
    geometry: ProbeGeometry,
) -> Complex64 {
    let num = Complex64::from_polar(geometry.r_factor() * q_l / q_c, phi_0);
    let den = Complex64::new(1.0, 2.0 * q_l * ((omega - omega_r) / omega_r));
    Complex64::new(1.0, 0.0) - num / den
}

fn wrap_angle(x: f64) -> f64 {
    let mut y = x.rem_euclid(2.0 * PI);
    if y > PI {
        y -= 2.0 * PI;
    }
    y
}

/// Cumulative phase unwrap. Returns the unwrapped phases and the adjacent
/// steps, each wrapped to `(-pi, pi]`.
fn unwrap_phases(zs: &[Complex64]) -> (Vec<f64>, Vec<f64>) {
    let mut out = Vec::with_capacity(zs.len());
    let mut steps = Vec::with_capacity(zs.len().saturating_sub(1));
    let mut prev = zs[0].arg();
    out.push(prev);
    for z in &zs[1..] {
        let step = wrap_angle(z.arg() - wrap_angle(prev));
        prev += step;
        steps.push(step);
        out.push(prev);
    }
    (out, steps)
}

fn wing_len(n: usize) -> usize {
    ((n as f64 * DELAY_WING_FRACTION).floor() as usize).max(3)
}

fn require_len(trace: &ComplexTrace, min: usize, stage: &'static str) -> Result<()> {
    if trace.len() < min {
        return Err(Error::numerical(
            stage,
            format!("trace has {} samples, at least {min} required", trace.len()),
        ));
    }
    Ok(())
}

/// Electrical delay from the unwrapped phase of the outer 20% of samples on
/// each side, in seconds.
///
/// Each wing gets its own phase intercept so that the winding accumulated
/// across the resonance does not bias the slope. The resonance tail seen in
/// the wings biases the result slightly; the full fit removes that. Tail
/// regressors would remove it here too but multiply the noise of the
/// estimate.
pub fn estimate_delay(trace: &ComplexTrace) -> Result<f64> {
    require_len(trace, MIN_FIT_SAMPLES, "delay")?;
    let n = trace.len();
    let nw = wing_len(n);
    let (phase, steps) = unwrap_phases(trace.s());
    let wing_steps = steps[..nw - 1].iter().chain(&steps[n - nw..]);
    if wing_steps.into_iter().any(|s| s.abs() > UNWRAP_LIMIT) {
        return Err(Error::numerical(
            "delay",
            "phase-unwrap ambiguity: adjacent wing samples differ by nearly half a turn",
        ));
    }
    let omegas = trace.omegas();
    let w_mid = 0.5 * (omegas[0] + omegas[n - 1]);
    let half_span = 0.5 * (omegas[n - 1] - omegas[0]);
    let rows: Vec<usize> = (0..nw).chain(n - nw..n).collect();
    let x = nalgebra::DMatrix::from_fn(rows.len(), 3, |r, col| {
        let i = rows[r];
        match col {
            0 => (i < nw) as u8 as f64,
            1 => (i >= n - nw) as u8 as f64,
            _ => (omegas[i] - w_mid) / half_span,
        }
    });
    let y: Vec<f64> = rows.iter().map(|&i| phase[i]).collect();
    let w = vec![1.0; rows.len()];
    let fit = crate::optim::weighted_least_squares(&x, &y, &w)
        .ok_or_else(|| Error::numerical("delay", "degenerate wing regression"))?;
    Ok(fit.beta[2] / half_span)
}

/// Mean of the outermost 5% of samples after removing the delay `tau`.
pub fn estimate_s_inf(trace: &ComplexTrace, tau: f64) -> Complex64 {
    let n = trace.len();
    let per_side = ((n as f64 * S_INF_FRACTION / 2.0).round() as usize).max(1);
    let idx = (0..per_side).chain(n - per_side..n);
    let mut sum = Complex64::new(0.0, 0.0);
    let mut count = 0.0;
    for i in idx {
        sum += trace.s()[i] * Complex64::from_polar(1.0, -trace.omega(i) * tau);
        count += 1.0;
    }
    sum / count
}

/// `S_m(w) e^{-i w tau} / s_inf`.
pub fn normalize(trace: &ComplexTrace, norm: &NormalizationParams) -> Result<ComplexTrace> {
    let inv = 1.0 / norm.s_inf;
    trace.map(|f, z| z * Complex64::from_polar(1.0, -crate::hz_to_rad(f) * norm.tau) * inv)
}

/// Algebraic circle fit result.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CircleFit {
    pub center: Complex64,
    pub radius: f64,
    /// RMS radial residual divided by `sqrt(N)`.
    pub sigma_radius: f64,
    /// RMS radial residual.
    pub rms_residual: f64,
}

/// Taubin circle fit of the points of a trace.
pub fn circle_fit(points: &ComplexTrace) -> Result<CircleFit> {
    circle_fit_points(points.s())
}

/// Taubin circle fit (Newton iteration on the characteristic polynomial).
pub fn circle_fit_points(points: &[Complex64]) -> Result<CircleFit> {
    let n = points.len();
    if n < MIN_CIRCLE_POINTS {
        return Err(Error::numerical(
            "circle fit",
            format!("{n} points, at least {MIN_CIRCLE_POINTS} required"),
        ));
    }
    let nf = n as f64;
    let mean = points.iter().sum::<Complex64>() / nf;
    let scale = (points.iter().map(|z| (z - mean).norm_sqr()).sum::<f64>() / nf).sqrt();
    if !(scale > 0.0) {
        return Err(Error::numerical("circle fit", "all points coincide"));
    }
    let (mut mxx, mut myy, mut mxy, mut mxz, mut myz, mut mzz) = (0.0, 0.0, 0.0, 0.0, 0.0, 0.0);
    for p in points {
        let q = (p - mean) / scale;
        let (x, y) = (q.re, q.im);
        let z = x * x + y * y;
        mxx += x * x;
        myy += y * y;
        mxy += x * y;
        mxz += x * z;
        myz += y * z;
        mzz += z * z;
    }
    mxx /= nf;
    myy /= nf;
    mxy /= nf;
    mxz /= nf;
    myz /= nf;
    mzz /= nf;
    let mz = mxx + myy;
    let cov_xy = mxx * myy - mxy * mxy;
    // collinear points have a rank-one scatter matrix
    if cov_xy <= 1e-12 * mz * mz {
        return Err(Error::numerical("circle fit", "points are collinear"));
    }
    let var_z = mzz - mz * mz;
    let a3 = 4.0 * mz;
    let a2 = -3.0 * mz * mz - mzz;
    let a1 = var_z * mz + 4.0 * cov_xy * mz - mxz * mxz - myz * myz;
    let a0 = mxz * (mxz * myy - myz * mxy) + myz * (myz * mxx - mxz * mxy) - var_z * cov_xy;
    let (a22, a33) = (2.0 * a2, 3.0 * a3);

    let mut x = 0.0;
    let mut y = f64::INFINITY;
    for _ in 0..50 {
        let y_old = y;
        y = a0 + x * (a1 + x * (a2 + x * a3));
        if y.abs() > y_old.abs() {
            x = 0.0;
            break;
        }
        let dy = a1 + x * (a22 + x * a33);
        let x_old = x;
        x = x_old - y / dy;
        if !x.is_finite() {
            x = 0.0;
            break;
        }
        if x == x_old || ((x - x_old) / x).abs() < 1e-14 {
            break;
        }
    }
    if x < 0.0 {
        x = 0.0;
    }
    let det = x * x - x * mz + cov_xy;
    if det.abs() <= 1e-14 * mz * mz {
        return Err(Error::numerical("circle fit", "degenerate point set"));
    }
    let cx = (mxz * (myy - x) - myz * mxy) / det / 2.0;
    let cy = (myz * (mxx - x) - mxz * mxy) / det / 2.0;
    let radius = (cx * cx + cy * cy + mz).sqrt() * scale;
    let center = Complex64::new(cx, cy) * scale + mean;
    if !(radius.is_finite() && center.re.is_finite() && center.im.is_finite()) {
        return Err(Error::numerical("circle fit", "non-finite circle"));
    }
    let ss: f64 = points
        .iter()
        .map(|p| ((p - center).norm() - radius).powi(2))
        .sum();
    let rms = (ss / nf).sqrt();
    Ok(CircleFit {
        center,
        radius,
        sigma_radius: rms / nf.sqrt(),
        rms_residual: rms,
    })
}

/// Phase fit result.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PhaseFit {
    /// Resonance frequency, rad/s.
    pub omega_r: f64,
    pub q_l: f64,
    /// Phase of the centered point at resonance (branch of the unwrapped data).
    pub theta_0: f64,
    /// Mismatch rotation `theta_0 - pi`, wrapped; zero in reflection.
    pub phi_0: f64,
}

fn crossing(omegas: &[f64], phase: &[f64], level: f64) -> Option<f64> {
    // phase decreases through the resonance
    for i in 0..phase.len() - 1 {
        let (a, b) = (phase[i] - level, phase[i + 1] - level);
        if a >= 0.0 && b < 0.0 {
            let t = a / (a - b);
            return Some(omegas[i] + t * (omegas[i + 1] - omegas[i]));
        }
    }
    None
}

/// Fit `theta(w) = theta_0 - 2 atan(2 Q_l (w/w_r - 1))` to the unwrapped
/// phase of points already translated so the circle center is the origin.
///
/// The phase must decrease through the resonance (see [`fit_resonance`],
/// which conjugates traces that wind the other way).
pub fn phase_fit(centered: &ComplexTrace, geometry: ProbeGeometry) -> Result<PhaseFit> {
    require_len(centered, MIN_CIRCLE_POINTS, "phase fit")?;
    let (phase, steps) = unwrap_phases(centered.s());
    if steps.iter().any(|s| s.abs() > UNWRAP_LIMIT) {
        return Err(Error::numerical(
            "phase fit",
            "phase-unwrap ambiguity: resonance undersampled",
        ));
    }
    let omegas = centered.omegas();
    let n = omegas.len();
    if phase[n - 1] > phase[0] {
        return Err(Error::numerical(
            "phase fit",
            "phase increases through the resonance (conjugate convention)",
        ));
    }
    let theta_init = 0.5 * (phase[0] + phase[n - 1]);
    let out_of_span = || Error::numerical("phase fit", "resonance outside scanned span");
    let w_r0 = crossing(&omegas, &phase, theta_init).ok_or_else(out_of_span)?;
    let w_lo = crossing(&omegas, &phase, theta_init + PI / 2.0);
    let w_hi = crossing(&omegas, &phase, theta_init - PI / 2.0);
    let q_l0 = match (w_lo, w_hi) {
        (Some(a), Some(b)) if b > a => w_r0 / (b - a),
        _ => {
            // fall back on the slope at the center: dtheta/dw = -4 Q_l / w_r
            let i = omegas.partition_point(|&w| w < w_r0).clamp(1, n - 1);
            let slope = (phase[i] - phase[i - 1]) / (omegas[i] - omegas[i - 1]);
            (-slope * w_r0 / 4.0).max(1.0)
        }
    };
    let kappa0 = w_r0 / q_l0;

    let model = |p: &[f64], w: f64| {
        let w_r = w_r0 + p[1] * kappa0;
        let q_l = q_l0 * p[2].exp();
        p[0] - 2.0 * (2.0 * q_l * ((w - w_r) / w_r)).atan()
    };
    let residuals = |p: &[f64], out: &mut [f64]| {
        if !p.iter().all(|v| v.is_finite()) || p[2].abs() > 50.0 {
            return false;
        }
        for i in 0..n {
            out[i] = phase[i] - model(p, omegas[i]);
        }
        true
    };
    let report = levenberg_marquardt(residuals, &[theta_init, 0.0, 0.0], n, LmConfig::default())?;
    if !report.converged {
        return Err(Error::numerical(
            "phase fit",
            format!("no convergence after {} iterations", report.iterations),
        ));
    }
    let p = &report.params;
    let omega_r = w_r0 + p[1] * kappa0;
    let q_l = q_l0 * p[2].exp();
    if omega_r < omegas[0] || omega_r > omegas[n - 1] {
        return Err(out_of_span());
    }
    let theta_0 = p[0];
    let phi_0 = if geometry.is_reflection() {
        0.0
    } else {
        wrap_angle(theta_0 - PI)
    };
    Ok(PhaseFit {
        omega_r,
        q_l,
        theta_0,
        phi_0,
    })
}

/// `(Q_i, Q_c)` from the normalized circle radius and loaded Q:
/// `Q_c = Q_l / R` in reflection, `Q_l / 2R` in hanger, `1/Q_i = 1/Q_l - 1/Q_c`.
pub fn extract_q(radius: f64, q_l: f64, geometry: ProbeGeometry) -> Result<(f64, f64)> {
    if !(radius > 0.0 && q_l > 0.0) {
        return Err(Error::invalid("circle", "radius and Q_l must be positive"));
    }
    let kr = geometry.radius_factor() * radius;
    if kr >= 1.0 {
        return Err(Error::numerical(
            "quality factors",
            format!("overcoupled beyond unitarity: circle diameter ratio {kr:.6} >= 1"),
        ));
    }
    let q_c = q_l / kr;
    let q_i = 1.0 / (1.0 / q_l - 1.0 / q_c);
    Ok((q_i, q_c))
}

/// Circle-radius error propagated to `1/Q_i`: `dR / (r R^2 Q_c)` with
/// `r = 1` in reflection and `r = 2` in hanger geometry.
pub fn q_uncertainty(sigma_radius: f64, radius: f64, q_c: f64, geometry: ProbeGeometry) -> f64 {
    sigma_radius / (geometry.radius_factor() * radius * radius * q_c)
}

/// Everything [`fit_resonance`] determined, including the normalization.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ResonanceReport {
    pub fit: ResonatorFit,
    pub normalization: NormalizationParams,
    /// Whether the trace was conjugated to match the fitting convention.
    pub conjugated: bool,
}

/// Electrical delay of the trace from the full fit, seconds.
pub fn fit_delay(trace: &ComplexTrace, geometry: ProbeGeometry) -> Result<f64> {
    fit_resonance_detailed(trace, geometry).map(|r| r.normalization.tau)
}

fn oriented(data: &ComplexTrace, conjugated: bool) -> Result<ComplexTrace> {
    if conjugated {
        data.map(|_, z| z.conj())
    } else {
        Ok(data.clone())
    }
}

/// Per-quadrature noise from first differences in the wings (MAD estimate).
fn quadrature_noise(s: &[Complex64]) -> f64 {
    let n = s.len();
    let nw = wing_len(n);
    let mut diffs: Vec<f64> = s[..nw]
        .windows(2)
        .chain(s[n - nw..].windows(2))
        .flat_map(|w| {
            let d = w[1] - w[0];
            [d.re.abs(), d.im.abs()]
        })
        .collect();
    diffs.sort_by(f64::total_cmp);
    diffs[diffs.len() / 2] / 0.6745 / 2f64.sqrt()
}

/// Largest deviation of a moving average from 1, and the noise of that
/// average.
fn smoothed_contrast(s: &[Complex64]) -> (f64, f64) {
    let n = s.len();
    let noise = quadrature_noise(s);
    let width = (n / 40).max(1);
    let one = Complex64::new(1.0, 0.0);
    let dev = s
        .windows(width)
        .map(|w| (w.iter().sum::<Complex64>() / width as f64 - one).norm())
        .fold(0.0, f64::max);
    (dev, noise / (width as f64).sqrt())
}

/// Parameters of `b e^{i (w - w_mid) d_tau} (1 - 2 R e^{i phi} / (1 + 2i Q_l (w/w_r - 1)))`
/// for data already divided by a rough delay and background.
#[derive(Debug, Clone, Copy)]
struct CircleParams {
    /// Off-resonant point; absorbs the phase `w_mid d_tau`.
    b: Complex64,
    d_tau: f64,
    omega_r: f64,
    q_l: f64,
    radius: f64,
    phi: f64,
    sigma_radius: f64,
}

/// Complex least-squares fit of all circle parameters at once, started from
/// the algebraic estimates.
fn refine_full(
    data: &ComplexTrace,
    geometry: ProbeGeometry,
    init: &CircleParams,
) -> Option<(CircleParams, f64)> {
    let omegas = data.omegas();
    let n = omegas.len();
    let w_mid = 0.5 * (omegas[0] + omegas[n - 1]);
    let half_span = 0.5 * (omegas[n - 1] - omegas[0]);
    let kappa0 = init.omega_r / init.q_l;
    let hanger = !geometry.is_reflection();
    let unpack = |p: &[f64]| {
        let b = Complex64::from_polar(init.b.norm() * p[0].exp(), init.b.arg() + p[1]);
        let d_tau = p[2] / half_span;
        let omega_r = init.omega_r + p[3] * kappa0;
        let q_l = init.q_l * p[4].exp();
        let radius = init.radius * p[5].exp();
        let phi = if hanger { init.phi + p[6] } else { 0.0 };
        (b, d_tau, omega_r, q_l, radius, phi)
    };
    let s = data.s();
    let residuals = |p: &[f64], out: &mut [f64]| {
        if !p.iter().all(|v| v.is_finite()) || p[4].abs() > 20.0 || p[5].abs() > 20.0 {
            return false;
        }
        let (b, d_tau, omega_r, q_l, radius, phi) = unpack(p);
        let dip = Complex64::from_polar(2.0 * radius, phi);
        for i in 0..n {
            let w = omegas[i];
            let x = Complex64::new(1.0, 2.0 * q_l * (w - omega_r) / omega_r);
            let m = b * Complex64::from_polar(1.0, (w - w_mid) * d_tau) * (1.0 - dip / x);
            let r = s[i] - m;
            out[2 * i] = r.re;
            out[2 * i + 1] = r.im;
        }
        true
    };
    let np = if hanger { 7 } else { 6 };
    let report = levenberg_marquardt(residuals, &vec![0.0; np], 2 * n, LmConfig::default()).ok()?;
    if !report.converged {
        return None;
    }
    let (b, d_tau, omega_r, q_l, radius, phi) = unpack(&report.params);
    if !(omega_r > omegas[0] && omega_r < omegas[n - 1] && radius > 0.0 && q_l > 0.0) {
        return None;
    }
    let cov = report.covariance(true)?;
    // radius is measured relative to |b|, which the covariance also varies
    let sigma_radius = radius * cov[(5, 5)].max(0.0).sqrt();
    let params = CircleParams {
        b: b * Complex64::from_polar(1.0, -w_mid * d_tau),
        d_tau,
        omega_r,
        q_l,
        radius,
        phi: wrap_angle(phi),
        sigma_radius,
    };
    Some((params, report.cost))
}

/// Sum of squared deviations of `data` from the model at `p`.
fn model_cost(data: &ComplexTrace, p: &CircleParams) -> f64 {
    let dip = Complex64::from_polar(2.0 * p.radius, p.phi);
    data.iter()
        .map(|(f, z)| {
            let w = crate::hz_to_rad(f);
            let x = Complex64::new(1.0, 2.0 * p.q_l * (w - p.omega_r) / p.omega_r);
            (z - p.b * Complex64::from_polar(1.0, w * p.d_tau) * (1.0 - dip / x)).norm_sqr()
        })
        .sum()
}

/// Start values from the circle and phase fits, and whether the data must be
/// conjugated to wind the fitted way.
fn algebraic_start(
    normalized: &ComplexTrace,
    geometry: ProbeGeometry,
) -> Result<(CircleParams, bool)> {
    let mut circle = circle_fit(normalized)?;
    let mut data = normalized.clone();
    let mut centered = data.map(|_, z| z - circle.center)?;
    let (phase, _) = unwrap_phases(centered.s());
    let conjugated = phase[phase.len() - 1] > phase[0];
    if conjugated {
        data = data.map(|_, z| z.conj())?;
        circle.center = circle.center.conj();
        centered = data.map(|_, z| z - circle.center)?;
    }
    let pf = phase_fit(&centered, geometry)?;
    // the off-resonant point sits opposite the resonance point on the circle
    let off_res = circle.center - Complex64::from_polar(circle.radius, pf.theta_0);
    if !(off_res.norm() > 0.0) {
        return Err(Error::numerical(
            "normalization",
            "off-resonant point at origin",
        ));
    }
    let start = CircleParams {
        b: off_res,
        d_tau: 0.0,
        omega_r: pf.omega_r,
        q_l: pf.q_l,
        radius: circle.radius / off_res.norm(),
        phi: (Complex64::new(1.0, 0.0) - circle.center / off_res).arg(),
        sigma_radius: circle.sigma_radius / off_res.norm(),
    };
    Ok((start, conjugated))
}

/// Start values from a grid search over resonance frequency, linewidth and
/// winding direction. For each grid point the background and the dip are
/// the linear least-squares solution, so noise that defeats the circle and
/// phase fits only blurs the cost surface.
fn projection_start(data: &ComplexTrace) -> Option<(CircleParams, bool)> {
    // the search only needs a start value, so thin long traces
    let stride = data.len().div_ceil(PROJECTION_SAMPLES);
    let omegas: Vec<f64> = data.omegas().into_iter().step_by(stride).collect();
    let z: Vec<Complex64> = data.s().iter().copied().step_by(stride).collect();
    let n = omegas.len();
    let span = omegas[n - 1] - omegas[0];
    let spacing = span / (n - 1) as f64;
    let zz: f64 = z.iter().map(|v| v.norm_sqr()).sum();
    let sum_z: Complex64 = z.iter().sum();
    const N_WIDTHS: usize = 32;
    let (k_min, k_max) = (2.0 * spacing, span / MIN_SPAN_LINEWIDTHS);
    let step = (n / 100).max(1);
    let mut v = vec![Complex64::new(0.0, 0.0); n];
    let mut best: Option<(f64, CircleParams, bool)> = None;
    for dir in [1.0, -1.0] {
        for j in 0..N_WIDTHS {
            let kappa = k_min * (k_max / k_min).powf(j as f64 / (N_WIDTHS - 1) as f64);
            for c in (n / 20..n - n / 20).step_by(step) {
                let w_r = omegas[c];
                let (mut sv, mut svv, mut svz) =
                    (Complex64::new(0.0, 0.0), 0.0, Complex64::new(0.0, 0.0));
                for i in 0..n {
                    v[i] = 1.0 / Complex64::new(1.0, dir * 2.0 * (omegas[i] - w_r) / kappa);
                    sv += v[i];
                    svv += v[i].norm_sqr();
                    svz += v[i].conj() * z[i];
                }
                let det = n as f64 * svv - sv.norm_sqr();
                if !(det > 1e-12 * n as f64 * svv) {
                    continue;
                }
                let b = (svv * sum_z - sv * svz) / det;
                let dip = (n as f64 * svz - sv.conj() * sum_z) / det;
                let cost = zz - (b.conj() * sum_z + dip.conj() * svz).re;
                if best.as_ref().is_none_or(|(c0, _, _)| cost < *c0) && b.norm() > 0.0 {
                    let conjugated = dir < 0.0;
                    let (b, dip) = if conjugated {
                        (b.conj(), dip.conj())
                    } else {
                        (b, dip)
                    };
                    let ratio = -dip / b;
                    let start = CircleParams {
                        b,
                        d_tau: 0.0,
                        omega_r: w_r,
                        q_l: w_r / kappa,
                        radius: 0.5 * ratio.norm(),
                        phi: ratio.arg(),
                        sigma_radius: 0.0,
                    };
                    best = Some((cost, start, conjugated));
                }
            }
        }
    }
    best.map(|(_, p, c)| (p, c))
}

/// Fit one resonance. See the module documentation for the stages.
pub fn fit_resonance(trace: &ComplexTrace, geometry: ProbeGeometry) -> Result<ResonatorFit> {
    fit_resonance_detailed(trace, geometry).map(|r| r.fit)
}

pub fn fit_resonance_detailed(
    trace: &ComplexTrace,
    geometry: ProbeGeometry,
) -> Result<ResonanceReport> {
    require_len(trace, MIN_FIT_SAMPLES, "resonance fit")?;
    let tau0 = estimate_delay(trace)?;
    let rough = estimate_s_inf(trace, tau0);
    if !(rough.norm() > 0.0) {
        return Err(Error::numerical(
            "normalization",
            "off-resonant level is zero",
        ));
    }
    let norm0 = NormalizationParams::new(tau0, rough)?;
    let normalized = normalize(trace, &norm0)?;
    let noise_sq = quadrature_noise(normalized.s()).powi(2);
    let (contrast, noise) = smoothed_contrast(normalized.s());
    if !(contrast > (6.0 * noise).max(1e-6)) {
        return Err(Error::numerical(
            "resonance fit",
            format!("no resonance found (contrast {contrast:.3e}, noise {noise:.3e})"),
        ));
    }
    let (tau, s_inf0) = (tau0, rough);

    // algebraic start first; the grid search only when that fails or leaves
    // residuals well above the noise floor
    let mut candidates: Vec<(CircleParams, bool, f64)> = Vec::new();
    let mut algebraic_err = None;
    match algebraic_start(&normalized, geometry) {
        Ok((start, conjugated)) => {
            let data = oriented(&normalized, conjugated)?;
            let (p, cost) = refine_full(&data, geometry, &start)
                .unwrap_or_else(|| (start, model_cost(&data, &start)));
            candidates.push((p, conjugated, cost));
        }
        Err(e) => algebraic_err = Some(e),
    }
    let noise_floor = 2.0 * normalized.len() as f64 * noise_sq;
    if candidates.iter().all(|c| !(c.2 <= 1.5 * noise_floor)) {
        if let Some((start, conjugated)) = projection_start(&normalized) {
            let data = oriented(&normalized, conjugated)?;
            if let Some((p, cost)) = refine_full(&data, geometry, &start) {
                candidates.push((p, conjugated, cost));
            }
        }
    }
    let Some(&(refined, conjugated, _)) = candidates.iter().min_by(|a, b| a.2.total_cmp(&b.2))
    else {
        return Err(algebraic_err
            .unwrap_or_else(|| Error::numerical("resonance fit", "no starting point converged")));
    };
    let radius = refined.radius;
    let sigma_radius = refined.sigma_radius;
    let center = Complex64::new(1.0, 0.0) - Complex64::from_polar(radius, refined.phi);
    let (tau, s_inf) = if conjugated {
        (tau - refined.d_tau, s_inf0 * refined.b.conj())
    } else {
        (tau + refined.d_tau, s_inf0 * refined.b)
    };
    let phi_0 = if geometry.is_reflection() {
        0.0
    } else {
        refined.phi
    };

    let (q_i, q_c) = extract_q(radius, refined.q_l, geometry)?;
    let sigma_inv_qi = q_uncertainty(sigma_radius, radius, q_c, geometry);
    let fit = ResonatorFit::new(
        refined.omega_r,
        q_i,
        q_c,
        refined.q_l,
        phi_0,
        center,
        radius,
        sigma_radius,
        sigma_inv_qi,
        geometry,
    )?;
    Ok(ResonanceReport {
        fit,
        normalization: NormalizationParams::new(tau, s_inf)?,
        conjugated,
    })
}

/// Re-derive `Q_i` of every fit with `Q_c` fixed to the mean fitted `Q_c`.
///
/// With `Q_c` pinned, `1/Q_i = (1 - rR)/(rR Q_c)` follows from the circle
/// radius alone, which is the relation the `1/Q_i` uncertainty of
/// [`q_uncertainty`] linearizes; `Q_l` becomes `rR Q_c`.
pub fn pin_coupling(fits: &[ResonatorFit]) -> Result<Vec<ResonatorFit>> {
    if fits.is_empty() {
        return Ok(Vec::new());
    }
    let q_c = fits.iter().map(|f| f.q_c).sum::<f64>() / fits.len() as f64;
    fits.iter()
        .map(|f| {
            let kr = f.geometry.radius_factor() * f.circle_radius;
            if !(kr < 1.0) {
                return Err(Error::numerical(
                    "coupling pin",
                    format!("circle diameter ratio {kr:.6} >= 1"),
                ));
            }
            let q_l = kr * q_c;
            ResonatorFit::new(
                f.omega_r,
                q_l / (1.0 - kr),
                q_c,
                q_l,
                f.phi_0,
                f.circle_center,
                f.circle_radius,
                f.sigma_radius,
                q_uncertainty(f.sigma_radius, f.circle_radius, q_c, f.geometry),
                f.geometry,
            )
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::spinmodel::loaded_response;
    use approx::assert_relative_eq;

    const W_R: f64 = 2.0 * PI * 8e9;

    /// Raw trace generated straight from the rate form of the response.
    #[allow(clippy::too_many_arguments)]
    fn raw_trace(
        qi: f64,
        qc: f64,
        phi_0: f64,
        geom: ProbeGeometry,
        tau: f64,
        s_inf: Complex64,
        half_span_linewidths: f64,
        n: usize,
    ) -> ComplexTrace {
        let ql = 1.0 / (1.0 / qi + 1.0 / qc);
        let kappa = W_R / ql;
        let freq: Vec<f64> = (0..n)
            .map(|i| {
                let x = -1.0 + 2.0 * i as f64 / (n - 1) as f64;
                crate::rad_to_hz(W_R + x * half_span_linewidths * kappa)
            })
            .collect();
        let s = freq
            .iter()
            .map(|&f| {
                let w = crate::hz_to_rad(f);
                s_inf
                    * Complex64::from_polar(1.0, w * tau)
                    * loaded_response(w, W_R, W_R / qi, W_R / qc, 0.0, phi_0, geom)
            })
            .collect();
        ComplexTrace::new(freq, s).unwrap()
    }

    #[test]
    fn pure_delay_recovered() {
        let n = 201;
        let freq: Vec<f64> = (0..n).map(|i| 7.99e9 + i as f64 * 1e5).collect();
        for tau in [62e-9, 0.0] {
            let s = freq
                .iter()
                .map(|&f| Complex64::from_polar(0.8, crate::hz_to_rad(f) * tau + 0.4))
                .collect();
            let t = ComplexTrace::new(freq.clone(), s).unwrap();
            let est = estimate_delay(&t).unwrap();
            assert!((est - tau).abs() < 0.05e-9, "{est}");
        }
    }

    #[test]
    fn delay_on_reflection_resonance() {
        let t = raw_trace(
            2e5,
            1e5,
            0.0,
            ProbeGeometry::REFLECTION,
            50e-9,
            Complex64::new(1.0, 0.0),
            10.0,
            801,
        );
        // the wing regression is a start value: its tail bias must leave only a
        // small phase error across the span, which the full fit then removes
        let est = estimate_delay(&t).unwrap();
        let half_span = 0.5 * (t.omega(t.len() - 1) - t.omega(0));
        assert!((est - 50e-9).abs() * half_span < 0.2, "{est}");
        let fitted = fit_delay(&t, ProbeGeometry::REFLECTION).unwrap();
        assert!((fitted - 50e-9).abs() / 50e-9 < 1e-9, "{fitted}");
    }

    #[test]
    fn short_or_undersampled_traces_rejected() {
        let freq: Vec<f64> = (0..10).map(|i| 8e9 + i as f64).collect();
        let t = ComplexTrace::new(freq, vec![Complex64::new(1.0, 0.0); 10]).unwrap();
        assert!(estimate_delay(&t).is_err());
        // delay of half a turn per sample in the wings
        let n = 64;
        let freq: Vec<f64> = (0..n).map(|i| 8e9 + i as f64 * 1e6).collect();
        let tau = 0.97 * 0.5 / 1e6;
        let s = freq
            .iter()
            .map(|&f| Complex64::from_polar(1.0, crate::hz_to_rad(f) * tau))
            .collect();
        let t = ComplexTrace::new(freq, s).unwrap();
        assert!(estimate_delay(&t).is_err());
    }

    #[test]
    fn normalize_definitions() {
        let freq: Vec<f64> = (0..32).map(|i| 8e9 + i as f64 * 1e5).collect();
        let norm = NormalizationParams::new(40e-9, Complex64::from_polar(0.7, 1.1)).unwrap();
        let s = freq
            .iter()
            .map(|&f| norm.s_inf * Complex64::from_polar(1.0, crate::hz_to_rad(f) * norm.tau))
            .collect();
        let t = ComplexTrace::new(freq.clone(), s).unwrap();
        for z in normalize(&t, &norm).unwrap().s() {
            assert!((z - Complex64::new(1.0, 0.0)).norm() < 1e-12);
        }
        let same = normalize(&t, &NormalizationParams::identity()).unwrap();
        assert_eq!(same, t);
        assert!(NormalizationParams::new(0.0, Complex64::new(0.0, 0.0)).is_err());
    }

    #[test]
    fn normalized_synthetic_matches_bare_model() {
        let s_inf = Complex64::from_polar(0.9, 0.2);
        let raw = raw_trace(
            2e5,
            1e5,
            0.0,
            ProbeGeometry::REFLECTION,
            50e-9,
            s_inf,
            10.0,
            201,
        );
        let bare = raw_trace(
            2e5,
            1e5,
            0.0,
            ProbeGeometry::REFLECTION,
            0.0,
            Complex64::new(1.0, 0.0),
            10.0,
            201,
        );
        let norm = NormalizationParams::new(50e-9, s_inf).unwrap();
        let out = normalize(&raw, &norm).unwrap();
        for (a, b) in out.s().iter().zip(bare.s()) {
            assert!((a - b).norm() < 1e-10);
        }
    }

    #[test]
    fn exact_circle_points() {
        let pts: Vec<Complex64> = (0..32)
            .map(|i| {
                Complex64::new(0.5, 0.0) + Complex64::from_polar(0.25, i as f64 * 2.0 * PI / 32.0)
            })
            .collect();
        let c = circle_fit_points(&pts).unwrap();
        assert!((c.center - Complex64::new(0.5, 0.0)).norm() < 1e-12);
        assert!((c.radius - 0.25).abs() < 1e-12);
        assert!(c.sigma_radius < 1e-12);
    }

    #[test]
    fn collinear_and_tiny_sets_rejected() {
        let line: Vec<Complex64> = (0..20)
            .map(|i| Complex64::new(i as f64, 2.0 * i as f64))
            .collect();
        assert!(circle_fit_points(&line).is_err());
        let few: Vec<Complex64> = (0..5)
            .map(|i| Complex64::from_polar(1.0, i as f64))
            .collect();
        assert!(circle_fit_points(&few).is_err());
    }

    #[test]
    fn reflection_circle_radius_is_ql_over_qc() {
        // Q_l / Q_c = 0.4
        let (qi, qc) = (1.5e5, 1e5 / 0.4 * (1.0 - 0.0));
        let ql = 1.0 / (1.0 / qi + 1.0 / qc);
        let t = raw_trace(
            qi,
            qc,
            0.0,
            ProbeGeometry::REFLECTION,
            0.0,
            Complex64::new(1.0, 0.0),
            10.0,
            401,
        );
        let c = circle_fit(&t).unwrap();
        assert_relative_eq!(c.radius, ql / qc, max_relative = 1e-10);
    }

    #[test]
    fn circle_diameters_follow_geometry() {
        for (qi, qc) in [(1e4, 1e6), (3e5, 2e5), (1e6, 1e4)] {
            let ql = 1.0 / (1.0 / qi + 1.0 / qc);
            for (geom, diameter) in [
                (ProbeGeometry::REFLECTION, 2.0 * ql / qc),
                (ProbeGeometry::HANGER, ql / qc),
            ] {
                let t = raw_trace(qi, qc, 0.3, geom, 0.0, Complex64::new(1.0, 0.0), 20.0, 301);
                let c = circle_fit(&t).unwrap();
                assert!((2.0 * c.radius - diameter).abs() < 1e-10 * diameter.max(1.0));
            }
        }
    }

    #[test]
    fn phase_fit_noiseless_self_consistency() {
        let (w_r, q_l) = (W_R, 1e5);
        let n = 401;
        let freq: Vec<f64> = (0..n)
            .map(|i| crate::rad_to_hz(w_r * (1.0 + (i as f64 - 200.0) / 200.0 * 5e-5)))
            .collect();
        let s = freq
            .iter()
            .map(|&f| {
                let w = crate::hz_to_rad(f);
                Complex64::from_polar(0.3, PI - 2.0 * (2.0 * q_l * (w / w_r - 1.0)).atan())
            })
            .collect();
        let t = ComplexTrace::new(freq, s).unwrap();
        let pf = phase_fit(&t, ProbeGeometry::REFLECTION).unwrap();
        assert_relative_eq!(pf.omega_r, w_r, max_relative = 1e-9);
        assert_relative_eq!(pf.q_l, q_l, max_relative = 1e-9);
        assert_eq!(pf.phi_0, 0.0);
        // the model phase offset sits exactly at resonance
        assert_eq!((2.0 * q_l * (pf.omega_r / pf.omega_r - 1.0)).atan(), 0.0);
    }

    #[test]
    fn extract_q_algebra() {
        let (qi, qc) = extract_q(0.5, 1e5, ProbeGeometry::REFLECTION).unwrap();
        assert_relative_eq!(qc, 2e5, max_relative = 1e-12);
        assert_relative_eq!(qi, 2e5, max_relative = 1e-12);
        let (qi, qc) = extract_q(0.25, 1e5, ProbeGeometry::HANGER).unwrap();
        assert_relative_eq!(qc, 2e5, max_relative = 1e-12);
        assert_relative_eq!(qi, 2e5, max_relative = 1e-12);
        assert!(extract_q(1.0, 1e5, ProbeGeometry::REFLECTION).is_err());
        assert!(extract_q(0.5, 1e5, ProbeGeometry::HANGER).is_err());
    }

    #[test]
    fn uncertainty_formula() {
        let v = q_uncertainty(1e-3, 0.5, 2e5, ProbeGeometry::REFLECTION);
        assert_relative_eq!(v, 2e-8, max_relative = 1e-12);
        assert_eq!(q_uncertainty(0.0, 0.5, 2e5, ProbeGeometry::HANGER), 0.0);
    }

    #[test]
    fn full_fit_noiseless_reflection() {
        let t = raw_trace(
            2e5,
            1e5,
            0.0,
            ProbeGeometry::REFLECTION,
            50e-9,
            Complex64::from_polar(0.9, 0.2),
            10.0,
            801,
        );
        let rep = fit_resonance_detailed(&t, ProbeGeometry::REFLECTION).unwrap();
        let f = rep.fit;
        assert_relative_eq!(f.omega_r, W_R, max_relative = 1e-9);
        assert_relative_eq!(f.q_i, 2e5, max_relative = 1e-6);
        assert_relative_eq!(f.q_c, 1e5, max_relative = 1e-6);
        assert_relative_eq!(rep.normalization.tau, 50e-9, max_relative = 1e-6);
        // the absolute phase of s_inf trades off against tau, its modulus does not
        assert_relative_eq!(rep.normalization.s_inf.norm(), 0.9, max_relative = 1e-6);
        assert!(!rep.conjugated);
    }

    #[test]
    fn full_fit_noiseless_hanger_phase() {
        let t = raw_trace(
            3e5,
            1e5,
            0.3,
            ProbeGeometry::HANGER,
            30e-9,
            Complex64::from_polar(0.5, -1.0),
            10.0,
            801,
        );
        let f = fit_resonance(&t, ProbeGeometry::HANGER).unwrap();
        assert!((f.phi_0 - 0.3).abs() < 0.01);
        assert_relative_eq!(f.q_i, 3e5, max_relative = 1e-6);
        assert_relative_eq!(f.q_c, 1e5, max_relative = 1e-6);
    }

    #[test]
    fn conjugate_convention_is_detected() {
        let t = raw_trace(
            2e5,
            1e5,
            0.0,
            ProbeGeometry::REFLECTION,
            0.0,
            Complex64::new(1.0, 0.0),
            10.0,
            401,
        );
        let conj = t.map(|_, z| z.conj()).unwrap();
        let rep = fit_resonance_detailed(&conj, ProbeGeometry::REFLECTION).unwrap();
        assert!(rep.conjugated);
        assert_relative_eq!(rep.fit.q_i, 2e5, max_relative = 1e-6);
    }

    #[test]
    fn flat_trace_has_no_resonance() {
        let freq: Vec<f64> = (0..200).map(|i| 8e9 + i as f64 * 1e4).collect();
        let t = ComplexTrace::new(freq, vec![Complex64::new(1.0, 0.0); 200]).unwrap();
        let err = fit_resonance(&t, ProbeGeometry::REFLECTION).unwrap_err();
        assert!(err.to_string().contains("no resonance found"), "{err}");
    }

    #[test]
    fn min_of_magnitude_within_half_step() {
        let t = raw_trace(
            2e5,
            1e5,
            0.0,
            ProbeGeometry::REFLECTION,
            0.0,
            Complex64::new(1.0, 0.0),
            10.0,
            400,
        );
        let f = fit_resonance(&t, ProbeGeometry::REFLECTION).unwrap();
        let i_min = (0..t.len())
            .min_by(|&a, &b| t.s()[a].norm().total_cmp(&t.s()[b].norm()))
            .unwrap();
        let step = t.omega(1) - t.omega(0);
        assert!((f.omega_r - t.omega(i_min)).abs() <= 0.5 * step + 1e-6);
    }

    #[test]
    fn pinning_keeps_loaded_relation() {
        let g = ProbeGeometry::REFLECTION;
        let a = ResonatorFit::new(
            W_R,
            2e5,
            1e5,
            1.0 / (1.0 / 2e5 + 1.0 / 1e5),
            0.0,
            Complex64::new(0.67, 0.0),
            0.33,
            1e-4,
            0.0,
            g,
        )
        .unwrap();
        let ql_b = 1.0 / (1.0 / 1e5 + 1.0 / 1.1e5);
        let b = ResonatorFit::new(
            W_R,
            1e5,
            1.1e5,
            ql_b,
            0.0,
            Complex64::new(0.6, 0.0),
            0.4,
            1e-4,
            0.0,
            g,
        )
        .unwrap();
        let pinned = pin_coupling(&[a, b]).unwrap();
        for (p, r) in pinned.iter().zip([0.33, 0.4]) {
            assert_relative_eq!(p.q_c, 1.05e5, max_relative = 1e-12);
            assert_relative_eq!(1.0 / p.q_i, (1.0 - r) / (r * 1.05e5), max_relative = 1e-12);
            assert_relative_eq!(1.0 / p.q_l, 1.0 / p.q_i + 1.0 / p.q_c, max_relative = 1e-9);
            assert!(p.sigma_inv_qi > 0.0);
        }
        assert!(pin_coupling(&[]).unwrap().is_empty());
    }
}

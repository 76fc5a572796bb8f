//! Field-sweep analysis: spin loss `kappa_s(B0)` from fitted sweeps, its
//! decomposition into line-shape templates, and the frequency-field diagram
//! used to identify spin species.

use nalgebra::DMatrix;

use crate::constants::{gamma_eff, HBAR, MU_B};
use crate::error::{Error, Result};
use crate::optim::{levenberg_marquardt, weighted_least_squares, LmConfig};
use crate::resfit::fit_resonance;
use crate::spinmodel::{field_for_frequency, hyperfine_satellite_fields, HyperfineSystem};
use crate::types::{ComplexTrace, FieldSweepPoint, LineShape, ProbeGeometry, SpinSpecies};

/// Points below this field serve as the zero-field reference, tesla.
pub const ZERO_FIELD_LIMIT: f64 = 2e-3;
/// Default wire-bond transition field, tesla.
pub const DEFAULT_B_WIREBOND: f64 = 0.010;
/// Width of the field range above the wire-bond step used to calibrate it.
pub const WIREBOND_CALIBRATION_WIDTH: f64 = 20e-3;
/// Plateau softness bounds, tesla.
pub const PLATEAU_SOFTNESS_MIN: f64 = 1e-3;
pub const PLATEAU_SOFTNESS_MAX: f64 = 20e-3;
/// Starting plateau softness, tesla.
pub const PLATEAU_SOFTNESS_SEED: f64 = 5e-3;
/// Minimum grid points across the full width of a peak template.
pub const MIN_POINTS_PER_WIDTH: f64 = 5.0;

/// Spin-induced loss rate as a function of static field.
#[derive(Debug, Clone, PartialEq)]
pub struct LossCurve {
    b0: Vec<f64>,
    kappa_s: Vec<f64>,
    sigma_kappa: Vec<f64>,
    omega_r_ref: f64,
}

impl LossCurve {
    pub fn new(
        b0: Vec<f64>,
        kappa_s: Vec<f64>,
        sigma_kappa: Vec<f64>,
        omega_r_ref: f64,
    ) -> Result<Self> {
        if b0.len() != kappa_s.len() || b0.len() != sigma_kappa.len() {
            return Err(Error::invalid("loss curve", "arrays differ in length"));
        }
        if b0
            .iter()
            .chain(&kappa_s)
            .chain(&sigma_kappa)
            .any(|v| !v.is_finite())
        {
            return Err(Error::invalid("loss curve", "non-finite value"));
        }
        if b0.windows(2).any(|w| w[1] <= w[0]) {
            return Err(Error::invalid(
                "loss curve",
                "field axis not strictly increasing",
            ));
        }
        if sigma_kappa.iter().any(|&s| s < 0.0) {
            return Err(Error::invalid("loss curve", "negative uncertainty"));
        }
        if !(omega_r_ref > 0.0 && omega_r_ref.is_finite()) {
            return Err(Error::invalid(
                "loss curve",
                "reference frequency must be positive",
            ));
        }
        Ok(LossCurve {
            b0,
            kappa_s,
            sigma_kappa,
            omega_r_ref,
        })
    }

    /// Static fields, tesla.
    pub fn b0(&self) -> &[f64] {
        &self.b0
    }

    /// Spin loss rate, 1/s.
    pub fn kappa_s(&self) -> &[f64] {
        &self.kappa_s
    }

    pub fn sigma_kappa(&self) -> &[f64] {
        &self.sigma_kappa
    }

    /// Resonator frequency the field axis refers to, rad/s.
    pub fn omega_r_ref(&self) -> f64 {
        self.omega_r_ref
    }

    pub fn len(&self) -> usize {
        self.b0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.b0.is_empty()
    }
}

/// Reference losses removed from `omega_r / Q_i(B0)`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Baselines {
    /// `1 / Q_i` at zero field.
    pub inv_q_i_zero: f64,
    /// Extra `1 / Q_i` above the wire-bond transition.
    pub inv_q_i_wirebond: f64,
    /// Wire-bond transition field, tesla.
    pub b_wirebond: f64,
}

fn sorted_sweep(sweep: &[FieldSweepPoint]) -> Result<Vec<FieldSweepPoint>> {
    let mut pts = sweep.to_vec();
    pts.sort_by(|a, b| a.b0.total_cmp(&b.b0));
    if let Some(w) = pts.windows(2).find(|w| w[0].b0 == w[1].b0) {
        return Err(Error::invalid(
            "sweep",
            format!("duplicate field {} T", w[0].b0),
        ));
    }
    Ok(pts)
}

fn median(mut v: Vec<f64>) -> f64 {
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

impl Baselines {
    /// Resolve the zero-field and wire-bond references.
    ///
    /// A missing `Q_i` at zero field is taken from the mean `1/Q_i` of points
    /// below 2 mT. A missing wire-bond `Q_i` is calibrated as the median
    /// excess `1/Q_i` in the 20 mT above the transition.
    pub fn resolve(
        sweep: &[FieldSweepPoint],
        q_i_zero: Option<f64>,
        q_i_wirebond: Option<f64>,
        b_wirebond: f64,
    ) -> Result<Self> {
        if !(b_wirebond.is_finite() && b_wirebond >= 0.0) {
            return Err(Error::invalid("wire-bond field", "must be >= 0"));
        }
        for (name, q) in [
            ("Q_i at zero field", q_i_zero),
            ("wire-bond Q_i", q_i_wirebond),
        ] {
            if let Some(q) = q {
                if !(q > 0.0 && q.is_finite()) {
                    return Err(Error::invalid(
                        "baseline",
                        format!("{name} must be positive"),
                    ));
                }
            }
        }
        let pts = sorted_sweep(sweep)?;
        let inv_q_i_zero = match q_i_zero {
            Some(q) => 1.0 / q,
            None => {
                let low: Vec<f64> = pts
                    .iter()
                    .filter(|p| p.b0 < ZERO_FIELD_LIMIT)
                    .map(|p| 1.0 / p.fit.q_i)
                    .collect();
                if low.is_empty() {
                    return Err(Error::invalid(
                        "baseline",
                        "no zero-field reference: give q_i_zero_field or measure a point below 2 mT",
                    ));
                }
                low.iter().sum::<f64>() / low.len() as f64
            }
        };
        if !pts.iter().any(|p| p.b0 <= b_wirebond) || !pts.iter().any(|p| p.b0 > b_wirebond) {
            return Err(Error::invalid(
                "baseline",
                format!(
                    "sweep needs points both below and above the wire-bond field {b_wirebond} T"
                ),
            ));
        }
        let inv_q_i_wirebond = match q_i_wirebond {
            Some(q) => 1.0 / q,
            None => {
                let excess: Vec<f64> = pts
                    .iter()
                    .filter(|p| {
                        p.b0 > b_wirebond && p.b0 <= b_wirebond + WIREBOND_CALIBRATION_WIDTH
                    })
                    .map(|p| 1.0 / p.fit.q_i - inv_q_i_zero)
                    .collect();
                if excess.is_empty() {
                    return Err(Error::invalid(
                        "baseline",
                        "no wire-bond reference: give q_i_wirebond or measure within 20 mT above the step",
                    ));
                }
                median(excess)
            }
        };
        Ok(Baselines {
            inv_q_i_zero,
            inv_q_i_wirebond,
            b_wirebond,
        })
    }

    fn inv_q_reference(&self, b0: f64) -> f64 {
        let step = if b0 > self.b_wirebond {
            self.inv_q_i_wirebond
        } else {
            0.0
        };
        self.inv_q_i_zero + step
    }

    /// `kappa_s = w_r (1/Q_i - 1/Q_i0 - [B0 > B_wb] / Q_i_wb)` with each
    /// point's own `w_r`.
    pub fn subtract(&self, sweep: &[FieldSweepPoint]) -> Result<LossCurve> {
        let pts = sorted_sweep(sweep)?;
        if pts.is_empty() {
            return Err(Error::invalid("sweep", "empty"));
        }
        let b0 = pts.iter().map(|p| p.b0).collect();
        let kappa = pts
            .iter()
            .map(|p| p.fit.omega_r * (1.0 / p.fit.q_i - self.inv_q_reference(p.b0)))
            .collect();
        let sigma = pts
            .iter()
            .map(|p| p.fit.omega_r * p.fit.sigma_inv_qi)
            .collect();
        let omega_ref = pts.iter().map(|p| p.fit.omega_r).sum::<f64>() / pts.len() as f64;
        LossCurve::new(b0, kappa, sigma, omega_ref)
    }

    /// Inverse of [`Baselines::subtract`] for one point: `w_r / Q_i`.
    pub fn restore(&self, b0: f64, kappa_s: f64, omega_r: f64) -> f64 {
        kappa_s + omega_r * self.inv_q_reference(b0)
    }
}

/// Spin loss curve with zero-field and wire-bond losses removed.
/// Fit every trace of a field sweep. Traces are independent and fitted in
/// parallel; the first failure is reported with its field.
pub fn fit_sweep(
    traces: &[(f64, ComplexTrace)],
    geometry: ProbeGeometry,
) -> Result<Vec<FieldSweepPoint>> {
    use rayon::prelude::*;
    traces
        .par_iter()
        .map(|(b0, trace)| {
            fit_resonance(trace, geometry)
                .and_then(|fit| FieldSweepPoint::new(*b0, fit))
                .map_err(|e| Error::AtField {
                    b0: *b0,
                    source: Box::new(e),
                })
        })
        .collect()
}

pub fn baseline_subtract(
    sweep: &[FieldSweepPoint],
    q_i_zero: Option<f64>,
    q_i_wirebond: Option<f64>,
    b_wirebond: f64,
) -> Result<LossCurve> {
    Baselines::resolve(sweep, q_i_zero, q_i_wirebond, b_wirebond)?.subtract(sweep)
}

/// Map the field axis to a common resonator frequency: `B * w~ / w_r`.
pub fn rescale_field(curve: &LossCurve, omega_tilde: f64) -> Result<LossCurve> {
    if !(omega_tilde > 0.0 && omega_tilde.is_finite()) {
        return Err(Error::invalid("rescale frequency", "must be positive"));
    }
    let ratio = omega_tilde / curve.omega_r_ref;
    LossCurve::new(
        curve.b0.iter().map(|b| b * ratio).collect(),
        curve.kappa_s.clone(),
        curve.sigma_kappa.clone(),
        omega_tilde,
    )
}

/// A line-shape template evaluated in field.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Template {
    /// `h / (1 + ((B - c)/w)^2)` with half width `w`.
    Lorentzian { height: f64, center: f64, hwhm: f64 },
    /// Lorentzian with separate half widths below and above the center.
    SplitLorentzian {
        height: f64,
        center: f64,
        hwhm_left: f64,
        hwhm_right: f64,
    },
    /// `A / (1 + exp(-(B - onset)/s))`.
    Plateau {
        amplitude: f64,
        onset: f64,
        softness: f64,
    },
}

fn softplus(x: f64) -> f64 {
    if x > 30.0 {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

impl Template {
    pub fn eval(&self, b: f64) -> f64 {
        match *self {
            Template::Lorentzian {
                height,
                center,
                hwhm,
            } => {
                let x = (b - center) / hwhm;
                height / (1.0 + x * x)
            }
            Template::SplitLorentzian {
                height,
                center,
                hwhm_left,
                hwhm_right,
            } => {
                let w = if b < center { hwhm_left } else { hwhm_right };
                let x = (b - center) / w;
                height / (1.0 + x * x)
            }
            Template::Plateau {
                amplitude,
                onset,
                softness,
            } => amplitude / (1.0 + (-(b - onset) / softness).exp()),
        }
    }

    /// `int template / w_r dB`, tesla. Peaks integrate over all fields, the
    /// plateau over `window` only.
    pub fn area(&self, omega_r: f64, window: (f64, f64)) -> f64 {
        let pi = std::f64::consts::PI;
        match *self {
            Template::Lorentzian { height, hwhm, .. } => pi * height * hwhm / omega_r,
            Template::SplitLorentzian {
                height,
                hwhm_left,
                hwhm_right,
                ..
            } => 0.5 * pi * height * (hwhm_left + hwhm_right) / omega_r,
            Template::Plateau {
                amplitude,
                onset,
                softness,
            } => {
                let sp = |b: f64| softplus((b - onset) / softness);
                amplitude * softness * (sp(window.1) - sp(window.0)) / omega_r
            }
        }
    }
}

/// One fitted component of a loss curve.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureFit {
    pub species_label: String,
    pub shape: LineShape,
    /// Peak (or plateau) loss rate, 1/s.
    pub peak_height: f64,
    /// Peak center or plateau onset, tesla.
    pub center_field: f64,
    /// Half width at half maximum (left half width for split lines, onset
    /// softness for plateaus), tesla.
    pub width_field: f64,
    /// Right half width of a split line, tesla.
    pub width_right_field: Option<f64>,
    /// `int kappa_s / w_r dB0`, tesla.
    pub area: f64,
    pub sigma_height: f64,
    pub sigma_center: f64,
    /// Frequency used to normalize the area, rad/s.
    pub omega_r: f64,
    /// Field window of the fit, tesla.
    pub window: (f64, f64),
}

impl FeatureFit {
    pub fn template(&self) -> Template {
        match self.shape {
            LineShape::Lorentzian => Template::Lorentzian {
                height: self.peak_height,
                center: self.center_field,
                hwhm: self.width_field,
            },
            LineShape::AsymmetricSplitLorentzian => Template::SplitLorentzian {
                height: self.peak_height,
                center: self.center_field,
                hwhm_left: self.width_field,
                hwhm_right: self.width_right_field.unwrap_or(self.width_field),
            },
            LineShape::PlateauStep => Template::Plateau {
                amplitude: self.peak_height,
                onset: self.center_field,
                softness: self.width_field,
            },
        }
    }
}

/// Analytic area of a fitted feature, tesla.
pub fn peak_area(feature: &FeatureFit) -> f64 {
    feature.template().area(feature.omega_r, feature.window)
}

/// Fitted components together with the fit residual.
#[derive(Debug, Clone, PartialEq)]
pub struct MultipeakFit {
    pub features: Vec<FeatureFit>,
    /// Fields inside the window, tesla.
    pub fields: Vec<f64>,
    /// Data minus the fitted sum at `fields`, 1/s.
    pub residual: Vec<f64>,
}

impl MultipeakFit {
    pub fn rms_residual(&self) -> f64 {
        if self.residual.is_empty() {
            return 0.0;
        }
        (self.residual.iter().map(|r| r * r).sum::<f64>() / self.residual.len() as f64).sqrt()
    }
}

#[derive(Debug, Clone)]
struct Slot {
    label: String,
    shape: LineShape,
    center: f64,
    width: f64,
    zeroed: bool,
}

impl Slot {
    fn n_params(&self) -> usize {
        match self.shape {
            LineShape::AsymmetricSplitLorentzian => 4,
            _ => 3,
        }
    }

    fn is_peak(&self) -> bool {
        self.shape != LineShape::PlateauStep
    }
}

fn logistic(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

fn softness_from(v: f64) -> f64 {
    PLATEAU_SOFTNESS_MIN + (PLATEAU_SOFTNESS_MAX - PLATEAU_SOFTNESS_MIN) * logistic(v)
}

fn softness_to(s: f64) -> f64 {
    let t = (s - PLATEAU_SOFTNESS_MIN) / (PLATEAU_SOFTNESS_MAX - PLATEAU_SOFTNESS_MIN);
    (t / (1.0 - t)).ln()
}

/// Unit length for center/onset offsets of a slot, tesla.
fn center_unit(slot: &Slot) -> f64 {
    if slot.is_peak() {
        slot.width
    } else {
        0.01
    }
}

/// Template of a slot from its transformed parameters.
fn decode(slot: &Slot, p: &[f64], h_scale: f64) -> Template {
    let height = h_scale * p[0] * p[0];
    let center = slot.center + p[1] * center_unit(slot);
    match slot.shape {
        LineShape::Lorentzian => Template::Lorentzian {
            height,
            center,
            hwhm: slot.width * p[2].exp(),
        },
        LineShape::AsymmetricSplitLorentzian => Template::SplitLorentzian {
            height,
            center,
            hwhm_left: slot.width * p[2].exp(),
            hwhm_right: slot.width * p[3].exp(),
        },
        LineShape::PlateauStep => Template::Plateau {
            amplitude: height,
            onset: center,
            softness: softness_from(p[2]),
        },
    }
}

fn unit_template(slot: &Slot, center: f64) -> Template {
    match slot.shape {
        LineShape::Lorentzian => Template::Lorentzian {
            height: 1.0,
            center,
            hwhm: slot.width,
        },
        LineShape::AsymmetricSplitLorentzian => Template::SplitLorentzian {
            height: 1.0,
            center,
            hwhm_left: slot.width,
            hwhm_right: slot.width,
        },
        LineShape::PlateauStep => Template::Plateau {
            amplitude: 1.0,
            onset: center,
            softness: slot.width,
        },
    }
}

/// Non-negative least squares by projected coordinate descent. Returns the
/// amplitudes and the weighted residual sum of squares.
fn nnls(columns: &[Vec<f64>], y: &[f64], w: &[f64]) -> (Vec<f64>, f64) {
    let k = columns.len();
    let mut gram = vec![vec![0.0; k]; k];
    let mut rhs = vec![0.0; k];
    for a in 0..k {
        rhs[a] = (0..y.len()).map(|i| w[i] * columns[a][i] * y[i]).sum();
        for b in 0..k {
            gram[a][b] = (0..y.len())
                .map(|i| w[i] * columns[a][i] * columns[b][i])
                .sum();
        }
    }
    let mut x = vec![0.0; k];
    for _ in 0..500 {
        let mut change = 0.0_f64;
        for a in 0..k {
            if gram[a][a] <= 0.0 {
                continue;
            }
            let g: f64 = (0..k).map(|b| gram[a][b] * x[b]).sum();
            let new = (x[a] + (rhs[a] - g) / gram[a][a]).max(0.0);
            change = change.max((new - x[a]).abs() * gram[a][a].sqrt());
            x[a] = new;
        }
        if change < 1e-14 {
            break;
        }
    }
    let rss = (0..y.len())
        .map(|i| {
            let pred: f64 = (0..k).map(|a| x[a] * columns[a][i]).sum();
            w[i] * (y[i] - pred).powi(2)
        })
        .sum();
    (x, rss)
}

fn build_slots(templates: &[SpinSpecies], omega_r: f64) -> Result<Vec<Slot>> {
    let mut slots = Vec::new();
    for sp in templates {
        let width = sp.gamma_line / (2.0 * gamma_eff(sp.g));
        match (sp.shape, sp.hyperfine_a) {
            (LineShape::PlateauStep, _) => slots.push(Slot {
                label: sp.label.clone(),
                shape: sp.shape,
                center: field_for_frequency(sp, omega_r)?,
                width: PLATEAU_SOFTNESS_SEED,
                zeroed: false,
            }),
            (shape, Some(a)) => {
                let hf = HyperfineSystem::new(a, sp.g, 0.0)?;
                let (lo, hi) = hyperfine_satellite_fields(&hf, omega_r)?;
                for (suffix, center) in [("low-field satellite", lo), ("high-field satellite", hi)]
                {
                    slots.push(Slot {
                        label: format!("{} {suffix}", sp.label),
                        shape,
                        center,
                        width,
                        zeroed: false,
                    });
                }
            }
            (shape, None) => slots.push(Slot {
                label: sp.label.clone(),
                shape,
                center: field_for_frequency(sp, omega_r)?,
                width,
                zeroed: false,
            }),
        }
    }
    Ok(slots)
}

struct Problem<'a> {
    b: &'a [f64],
    y: &'a [f64],
    /// Square roots of the weights.
    sw: &'a [f64],
    h_scale: f64,
}

struct SlotFit {
    template: Template,
    sigma_height: f64,
    sigma_center: f64,
}

fn fit_slots(prob: &Problem, slots: &[Slot], seed_heights: &[f64]) -> Result<Vec<SlotFit>> {
    let active: Vec<usize> = (0..slots.len()).filter(|&k| !slots[k].zeroed).collect();
    let mut offsets = Vec::with_capacity(active.len());
    let mut x0 = Vec::new();
    for &k in &active {
        offsets.push(x0.len());
        let s = &slots[k];
        x0.push((seed_heights[k].max(1e-3 * prob.h_scale) / prob.h_scale).sqrt());
        x0.push(0.0);
        match s.shape {
            LineShape::PlateauStep => x0.push(softness_to(s.width)),
            LineShape::AsymmetricSplitLorentzian => {
                x0.push(0.0);
                x0.push(0.0);
            }
            LineShape::Lorentzian => x0.push(0.0),
        }
    }
    let m = prob.b.len();
    let residuals = |p: &[f64], out: &mut [f64]| {
        if p.iter().any(|v| !v.is_finite() || v.abs() > 1e6) {
            return false;
        }
        let templates: Vec<Template> = active
            .iter()
            .zip(&offsets)
            .map(|(&k, &o)| decode(&slots[k], &p[o..o + slots[k].n_params()], prob.h_scale))
            .collect();
        for (i, r) in out.iter_mut().enumerate().take(m) {
            let model: f64 = templates.iter().map(|t| t.eval(prob.b[i])).sum();
            *r = prob.sw[i] * (prob.y[i] - model) / prob.h_scale;
        }
        true
    };
    if x0.is_empty() {
        return Ok(Vec::new());
    }
    let cfg = LmConfig {
        max_iter: 1000,
        ..LmConfig::default()
    };
    let report = levenberg_marquardt(residuals, &x0, m, cfg)?;
    if !report.converged {
        return Err(Error::numerical(
            "multipeak fit",
            format!("no convergence after {} iterations", report.iterations),
        ));
    }
    let cov = report.covariance(true);
    let mut out = Vec::with_capacity(slots.len());
    let mut next = active.iter().zip(&offsets).peekable();
    for (k, slot) in slots.iter().enumerate() {
        if let Some(&(&ka, &o)) = next.peek() {
            if ka == k {
                next.next();
                let p = &report.params[o..o + slot.n_params()];
                let var = |j: usize| {
                    cov.as_ref()
                        .map_or(f64::NAN, |c| c[(o + j, o + j)].max(0.0))
                };
                out.push(SlotFit {
                    template: decode(slot, p, prob.h_scale),
                    sigma_height: 2.0 * prob.h_scale * p[0].abs() * var(0).sqrt(),
                    sigma_center: center_unit(slot) * var(1).sqrt(),
                });
                continue;
            }
        }
        let template = match unit_template(slot, slot.center) {
            Template::Lorentzian { center, hwhm, .. } => Template::Lorentzian {
                height: 0.0,
                center,
                hwhm,
            },
            Template::SplitLorentzian {
                center,
                hwhm_left,
                hwhm_right,
                ..
            } => Template::SplitLorentzian {
                height: 0.0,
                center,
                hwhm_left,
                hwhm_right,
            },
            Template::Plateau {
                onset, softness, ..
            } => Template::Plateau {
                amplitude: 0.0,
                onset,
                softness,
            },
        };
        out.push(SlotFit {
            template,
            sigma_height: 0.0,
            sigma_center: 0.0,
        });
    }
    Ok(out)
}

fn template_center(t: &Template) -> f64 {
    match *t {
        Template::Lorentzian { center, .. } | Template::SplitLorentzian { center, .. } => center,
        Template::Plateau { onset, .. } => onset,
    }
}

/// Simultaneous least-squares decomposition of `curve` inside `window` into
/// one template per species (two for hyperfine species, one per satellite).
///
/// Peak centers are seeded at the species resonance fields for the curve's
/// reference frequency. Plateau onsets are seeded by a grid search. All
/// amplitudes are non-negative.
pub fn multipeak_fit(
    curve: &LossCurve,
    templates: &[SpinSpecies],
    window: (f64, f64),
) -> Result<MultipeakFit> {
    let (lo, hi) = window;
    if !(lo.is_finite() && hi.is_finite() && hi > lo) {
        return Err(Error::invalid("fit window", format!("[{lo}, {hi}] T")));
    }
    let idx: Vec<usize> = (0..curve.len())
        .filter(|&i| curve.b0[i] >= lo && curve.b0[i] <= hi)
        .collect();
    let b: Vec<f64> = idx.iter().map(|&i| curve.b0[i]).collect();
    let y: Vec<f64> = idx.iter().map(|&i| curve.kappa_s[i]).collect();
    if templates.is_empty() {
        return Ok(MultipeakFit {
            features: Vec::new(),
            fields: b,
            residual: y,
        });
    }
    let omega_r = curve.omega_r_ref;
    let mut slots = build_slots(templates, omega_r)?;
    let n_par: usize = slots.iter().map(Slot::n_params).sum();
    if b.len() < 5 * slots.len() || b.len() <= n_par {
        return Err(Error::invalid(
            "fit window",
            format!("{} points for {} templates", b.len(), slots.len()),
        ));
    }
    let spacing = median(b.windows(2).map(|w| w[1] - w[0]).collect());
    for s in slots.iter().filter(|s| s.is_peak()) {
        if 2.0 * s.width < MIN_POINTS_PER_WIDTH * spacing {
            return Err(Error::invalid(
                "fit window",
                format!(
                    "`{}` is {:.3} mT wide but the grid step is {:.3} mT",
                    s.label,
                    2e3 * s.width,
                    1e3 * spacing
                ),
            ));
        }
    }
    for i in 0..slots.len() {
        for j in i + 1..slots.len() {
            if slots[i].is_peak()
                && slots[j].is_peak()
                && (slots[i].center - slots[j].center).abs() < spacing
            {
                return Err(Error::invalid(
                    "templates",
                    format!(
                        "`{}` and `{}` are seeded closer than the grid step",
                        slots[i].label, slots[j].label
                    ),
                ));
            }
        }
    }

    let sigma: Vec<f64> = idx.iter().map(|&i| curve.sigma_kappa[i]).collect();
    let w: Vec<f64> = if sigma.iter().all(|&s| s > 0.0) {
        let mean_var = sigma.iter().map(|s| s * s).sum::<f64>() / sigma.len() as f64;
        sigma.iter().map(|s| mean_var / (s * s)).collect()
    } else {
        vec![1.0; b.len()]
    };
    let sw: Vec<f64> = w.iter().map(|v| v.sqrt()).collect();
    let h_scale = y
        .iter()
        .fold(0.0_f64, |m, v| m.max(v.abs()))
        .max(f64::MIN_POSITIVE);

    // plateau onsets by grid search with the other templates at their seeds
    let columns = |slots: &[Slot]| -> Vec<Vec<f64>> {
        slots
            .iter()
            .map(|s| {
                b.iter()
                    .map(|&x| unit_template(s, s.center).eval(x))
                    .collect()
            })
            .collect()
    };
    let n_steps = (((hi - lo) / spacing).round() as usize).clamp(1, 400);
    for k in 0..slots.len() {
        if slots[k].is_peak() {
            continue;
        }
        let mut best = (f64::INFINITY, slots[k].center);
        for step in 0..=n_steps {
            let onset = lo + (hi - lo) * step as f64 / n_steps as f64;
            slots[k].center = onset;
            let (_, rss) = nnls(&columns(&slots), &y, &w);
            if rss < best.0 {
                best = (rss, onset);
            }
        }
        slots[k].center = best.1;
    }
    let (seed_heights, _) = nnls(&columns(&slots), &y, &w);
    let prob = Problem {
        b: &b,
        y: &y,
        sw: &sw,
        h_scale,
    };
    let mut fits = fit_slots(&prob, &slots, &seed_heights)?;

    // two peaks converged onto one line: keep the larger, refit once
    let mut merged = false;
    for i in 0..slots.len() {
        for j in i + 1..slots.len() {
            if !(slots[i].is_peak() && slots[j].is_peak()) || slots[i].zeroed || slots[j].zeroed {
                continue;
            }
            let (ci, cj) = (
                template_center(&fits[i].template),
                template_center(&fits[j].template),
            );
            if (ci - cj).abs() < spacing {
                let (ai, aj) = (
                    fits[i].template.area(omega_r, window),
                    fits[j].template.area(omega_r, window),
                );
                let drop = if ai >= aj { j } else { i };
                slots[drop].zeroed = true;
                merged = true;
            }
        }
    }
    if merged {
        let seeds: Vec<f64> =
            fits.iter()
                .map(|f| match f.template {
                    Template::Lorentzian { height, .. }
                    | Template::SplitLorentzian { height, .. } => height,
                    Template::Plateau { amplitude, .. } => amplitude,
                })
                .collect();
        for (slot, f) in slots.iter_mut().zip(&fits) {
            if !slot.zeroed {
                slot.center = template_center(&f.template);
            }
        }
        fits = fit_slots(&prob, &slots, &seeds)?;
    }

    let residual = (0..b.len())
        .map(|i| y[i] - fits.iter().map(|f| f.template.eval(b[i])).sum::<f64>())
        .collect();
    let features = slots
        .iter()
        .zip(fits)
        .map(|(slot, f)| {
            let (height, center, width, width_right) = match f.template {
                Template::Lorentzian {
                    height,
                    center,
                    hwhm,
                } => (height, center, hwhm, None),
                Template::SplitLorentzian {
                    height,
                    center,
                    hwhm_left,
                    hwhm_right,
                } => (height, center, hwhm_left, Some(hwhm_right)),
                Template::Plateau {
                    amplitude,
                    onset,
                    softness,
                } => (amplitude, onset, softness, None),
            };
            FeatureFit {
                species_label: slot.label.clone(),
                shape: slot.shape,
                peak_height: height,
                center_field: center,
                width_field: width,
                width_right_field: width_right,
                area: f.template.area(omega_r, window),
                sigma_height: f.sigma_height,
                sigma_center: f.sigma_center,
                omega_r,
                window,
            }
        })
        .collect();
    Ok(MultipeakFit {
        features,
        fields: b,
        residual,
    })
}

/// A feature position measured with one resonator.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DiagramPoint {
    /// Resonator frequency, rad/s.
    pub omega_r: f64,
    /// Feature field, tesla.
    pub b_feature: f64,
    pub sigma_b: f64,
}

impl DiagramPoint {
    pub fn new(omega_r: f64, b_feature: f64, sigma_b: f64) -> Result<Self> {
        for (name, v) in [
            ("frequency", omega_r),
            ("field", b_feature),
            ("field uncertainty", sigma_b),
        ] {
            if !(v > 0.0 && v.is_finite()) {
                return Err(Error::invalid(
                    "diagram point",
                    format!("{name} must be positive, got {v}"),
                ));
            }
        }
        Ok(DiagramPoint {
            omega_r,
            b_feature,
            sigma_b,
        })
    }
}

/// Straight line `w = Delta_0 + g mu_B B / hbar` through diagram points.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DiagramFit {
    pub g: f64,
    /// Zero-field splitting, rad/s.
    pub delta_0: f64,
    /// Covariance of `(g, delta_0)`.
    pub covariance: [[f64; 2]; 2],
}

impl DiagramFit {
    pub fn sigma_g(&self) -> f64 {
        self.covariance[0][0].sqrt()
    }

    pub fn sigma_delta_0(&self) -> f64 {
        self.covariance[1][1].sqrt()
    }
}

/// Fit `g` and `Delta_0` to a frequency-field diagram.
///
/// The field is the noisy coordinate, so the regression is `B = a + b w`
/// with weights `1/sigma_B^2`; then `g = hbar / (mu_B b)` and
/// `Delta_0 = -a / b`, with the covariance propagated to first order.
pub fn build_diagram(points: &[DiagramPoint]) -> Result<DiagramFit> {
    if points.len() < 2 {
        return Err(Error::invalid(
            "diagram",
            format!("{} points, at least 2 required", points.len()),
        ));
    }
    let w_scale = points.iter().map(|p| p.omega_r).fold(0.0, f64::max);
    let x = DMatrix::from_fn(points.len(), 2, |i, j| {
        if j == 0 {
            1.0
        } else {
            points[i].omega_r / w_scale
        }
    });
    let y: Vec<f64> = points.iter().map(|p| p.b_feature).collect();
    let wts: Vec<f64> = points
        .iter()
        .map(|p| 1.0 / (p.sigma_b * p.sigma_b))
        .collect();
    let fit = weighted_least_squares(&x, &y, &wts).ok_or_else(|| {
        Error::numerical("diagram", "singular design: features at a single field")
    })?;
    let a = fit.beta[0];
    let slope = fit.beta[1] / w_scale;
    if !(slope > 0.0) {
        return Err(Error::numerical(
            "diagram",
            "feature field does not increase with frequency",
        ));
    }
    let cov_ab = [
        [fit.covariance[(0, 0)], fit.covariance[(0, 1)] / w_scale],
        [
            fit.covariance[(1, 0)] / w_scale,
            fit.covariance[(1, 1)] / (w_scale * w_scale),
        ],
    ];
    let g = HBAR / (MU_B * slope);
    let delta_0 = -a / slope;
    // rows: d(g, delta_0) / d(a, b)
    let jac = [[0.0, -g / slope], [-1.0 / slope, a / (slope * slope)]];
    let mut cov = [[0.0; 2]; 2];
    for r in 0..2 {
        for c in 0..2 {
            cov[r][c] = (0..2)
                .flat_map(|i| (0..2).map(move |j| (i, j)))
                .map(|(i, j)| jac[r][i] * cov_ab[i][j] * jac[c][j])
                .sum();
        }
    }
    Ok(DiagramFit {
        g,
        delta_0,
        covariance: cov,
    })
}

/// Scale of `g` differences in [`identify_species`].
pub const MATCH_SCALE_G: f64 = 0.1;
/// Scale of zero-field-splitting differences in [`identify_species`], rad/s.
pub const MATCH_SCALE_DELTA_0: f64 = 2.0 * std::f64::consts::PI * 0.2e9;

#[derive(Debug, Clone, PartialEq)]
pub struct SpeciesMatch {
    pub species: SpinSpecies,
    pub index: usize,
    /// `exp(-d^2 / 2)` with `d` the scaled `(g, Delta_0)` distance.
    pub score: f64,
}

/// Nearest catalog entry to `(g, delta_0)`.
pub fn identify_species(g: f64, delta_0: f64, catalog: &[SpinSpecies]) -> Result<SpeciesMatch> {
    if catalog.is_empty() {
        return Err(Error::invalid("catalog", "empty"));
    }
    let d2 = |s: &SpinSpecies| {
        ((g - s.g) / MATCH_SCALE_G).powi(2) + ((delta_0 - s.delta_0) / MATCH_SCALE_DELTA_0).powi(2)
    };
    let (index, best) = catalog
        .iter()
        .enumerate()
        .fold((0, f64::INFINITY), |(bi, bd), (i, s)| {
            let d = d2(s);
            if d < bd {
                (i, d)
            } else {
                (bi, bd)
            }
        });
    Ok(SpeciesMatch {
        species: catalog[index].clone(),
        index,
        score: (-0.5 * best).exp(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::types::{ProbeGeometry, ResonatorFit};
    use approx::assert_relative_eq;
    use num_complex::Complex64;
    use std::f64::consts::PI;

    const W8: f64 = 2.0 * PI * 8e9;

    fn point(b0: f64, q_i: f64) -> FieldSweepPoint {
        let q_c = 1e5;
        let q_l = 1.0 / (1.0 / q_i + 1.0 / q_c);
        let fit = ResonatorFit::new(
            W8,
            q_i,
            q_c,
            q_l,
            0.0,
            Complex64::new(0.5, 0.0),
            0.5,
            1e-4,
            1e-8,
            ProbeGeometry::REFLECTION,
        )
        .unwrap();
        FieldSweepPoint::new(b0, fit).unwrap()
    }

    #[test]
    fn baseline_arithmetic() {
        let sweep = [point(0.0, 5e5), point(0.1, 1e5)];
        let c = baseline_subtract(&sweep, Some(5e5), Some(3e5), 0.01).unwrap();
        let expect = W8 * (1.0 / 1e5 - 1.0 / 5e5 - 1.0 / 3e5);
        assert_relative_eq!(c.kappa_s()[1], expect, max_relative = 1e-12);
        assert_eq!(c.kappa_s()[0], 0.0);
        assert_relative_eq!(c.sigma_kappa()[0], W8 * 1e-8, max_relative = 1e-12);
    }

    #[test]
    fn constant_sweep_is_flat_after_step_calibration() {
        let mut sweep = vec![point(0.0, 2e5), point(0.001, 2e5), point(0.005, 2e5)];
        for k in 1..40 {
            sweep.push(point(0.01 + k as f64 * 2e-3, 1.5e5));
        }
        let c = baseline_subtract(&sweep, None, None, 0.01).unwrap();
        for k in c.kappa_s() {
            assert!(k.abs() < 1e-9 * W8 / 2e5);
        }
    }

    #[test]
    fn missing_references_are_reported() {
        let sweep = [point(0.005, 2e5), point(0.05, 2e5)];
        let err = baseline_subtract(&sweep, None, Some(3e5), 0.01).unwrap_err();
        assert!(err.to_string().contains("zero-field"), "{err}");
        let only_low = [point(0.0, 2e5), point(0.005, 2e5)];
        assert!(baseline_subtract(&only_low, None, Some(3e5), 0.01).is_err());
        let dup = [point(0.0, 2e5), point(0.0, 2e5), point(0.1, 2e5)];
        assert!(baseline_subtract(&dup, None, Some(3e5), 0.01).is_err());
    }

    #[test]
    fn baselines_restore_exactly() {
        let sweep: Vec<_> = (0..30)
            .map(|k| point(k as f64 * 0.004, 1e5 + 3e3 * k as f64))
            .collect();
        let base = Baselines::resolve(&sweep, None, None, 0.01).unwrap();
        let c = base.subtract(&sweep).unwrap();
        for (p, (&b, &k)) in sweep.iter().zip(c.b0().iter().zip(c.kappa_s())) {
            assert_relative_eq!(
                base.restore(b, k, p.fit.omega_r),
                p.fit.omega_r / p.fit.q_i,
                max_relative = 1e-13
            );
        }
    }

    fn curve(b: Vec<f64>, k: Vec<f64>, w: f64) -> LossCurve {
        let n = b.len();
        LossCurve::new(b, k, vec![0.0; n], w).unwrap()
    }

    #[test]
    fn rescale_examples() {
        let c = curve(vec![0.05, 0.1], vec![1.0, 2.0], 2.0 * PI * 4e9);
        let r = rescale_field(&c, W8).unwrap();
        assert_relative_eq!(r.b0()[1], 0.2, max_relative = 1e-15);
        assert_eq!(r.kappa_s(), c.kappa_s());
        let same = rescale_field(&c, c.omega_r_ref()).unwrap();
        assert_eq!(same.b0(), c.b0());
        let back = rescale_field(&r, c.omega_r_ref()).unwrap();
        for (a, b) in back.b0().iter().zip(c.b0()) {
            assert!((a - b).abs() <= 1e-15 * b.abs());
        }
    }

    #[test]
    fn template_areas_match_quadrature() {
        let w = W8;
        let window = (0.0, 0.6);
        for t in [
            Template::Lorentzian {
                height: 5e3,
                center: 0.3,
                hwhm: 0.01,
            },
            Template::SplitLorentzian {
                height: 5e3,
                center: 0.3,
                hwhm_left: 0.004,
                hwhm_right: 0.012,
            },
            Template::Plateau {
                amplitude: 2e3,
                onset: 0.05,
                softness: 0.005,
            },
        ] {
            // trapezoid on a fine grid plus analytic Lorentzian tails
            let n = 600_000;
            let h = (window.1 - window.0) / n as f64;
            let mut s = 0.5 * (t.eval(window.0) + t.eval(window.1));
            for i in 1..n {
                s += t.eval(window.0 + i as f64 * h);
            }
            let mut quad = s * h / w;
            let tails = match t {
                Template::Lorentzian {
                    height,
                    center,
                    hwhm,
                } => {
                    height
                        * hwhm
                        * (PI - ((window.1 - center) / hwhm).atan()
                            + ((window.0 - center) / hwhm).atan())
                        / w
                }
                Template::SplitLorentzian {
                    height,
                    center,
                    hwhm_left,
                    hwhm_right,
                } => {
                    height * hwhm_left * (PI / 2.0 + ((window.0 - center) / hwhm_left).atan()) / w
                        + height
                            * hwhm_right
                            * (PI / 2.0 - ((window.1 - center) / hwhm_right).atan())
                            / w
                }
                Template::Plateau { .. } => 0.0,
            };
            quad += tails;
            assert_relative_eq!(t.area(w, window), quad, max_relative = 1e-3);
        }
        let zero = Template::Lorentzian {
            height: 0.0,
            center: 0.3,
            hwhm: 0.01,
        };
        assert_eq!(zero.area(w, window), 0.0);
    }

    #[test]
    fn lorentzian_area_formula() {
        let t = Template::Lorentzian {
            height: 2.0,
            center: 0.1,
            hwhm: 0.003,
        };
        assert_relative_eq!(
            t.area(W8, (0.0, 1.0)),
            PI * 2.0 * 0.003 / W8,
            max_relative = 1e-15
        );
    }

    fn species_at(label: &str, b: f64, hwhm: f64, shape: LineShape) -> SpinSpecies {
        let g = HBAR * W8 / (MU_B * b);
        let gamma = 2.0 * hwhm * gamma_eff(g);
        SpinSpecies::new(label, g, 0.0, gamma, shape, None).unwrap()
    }

    #[test]
    fn empty_templates_leave_residual() {
        let b: Vec<f64> = (0..50).map(|i| i as f64 * 1e-3).collect();
        let k: Vec<f64> = b.iter().map(|x| x * 10.0).collect();
        let c = curve(b, k.clone(), W8);
        let fit = multipeak_fit(&c, &[], (0.0, 1.0)).unwrap();
        assert!(fit.features.is_empty());
        assert_eq!(fit.residual, k);
    }

    #[test]
    fn noiseless_two_peaks_recovered() {
        let truth = [
            Template::Lorentzian {
                height: 4e3,
                center: 0.25,
                hwhm: 0.008,
            },
            Template::Lorentzian {
                height: 2e3,
                center: 0.31,
                hwhm: 0.005,
            },
        ];
        let b: Vec<f64> = (0..400).map(|i| 0.2 + i as f64 * 0.4e-3).collect();
        let k: Vec<f64> = b
            .iter()
            .map(|&x| truth.iter().map(|t| t.eval(x)).sum())
            .collect();
        let c = curve(b, k, W8);
        let species = [
            species_at("a", 0.253, 0.006, LineShape::Lorentzian),
            species_at("b", 0.308, 0.007, LineShape::Lorentzian),
        ];
        let fit = multipeak_fit(&c, &species, (0.2, 0.36)).unwrap();
        for (f, t) in fit.features.iter().zip(&truth) {
            assert_relative_eq!(f.area, t.area(W8, (0.2, 0.36)), max_relative = 1e-6);
            assert_relative_eq!(peak_area(f), f.area, max_relative = 1e-12);
        }
        assert!(fit.rms_residual() < 1e-6);
    }

    #[test]
    fn coincident_seeds_rejected() {
        let b: Vec<f64> = (0..200).map(|i| 0.2 + i as f64 * 1e-3).collect();
        let c = curve(b.clone(), vec![0.0; 200], W8);
        let s = [
            species_at("a", 0.3, 0.01, LineShape::Lorentzian),
            species_at("b", 0.3002, 0.01, LineShape::Lorentzian),
        ];
        assert!(multipeak_fit(&c, &s, (0.2, 0.4)).is_err());
        // too coarse for a 1 mT wide line
        let narrow = [species_at("n", 0.3, 0.001, LineShape::Lorentzian)];
        assert!(multipeak_fit(&c, &narrow, (0.2, 0.4)).is_err());
    }

    #[test]
    fn diagram_exact_recovery() {
        let g = 1.85;
        let d0 = 2.0 * PI * 0.28e9;
        let pts: Vec<DiagramPoint> = [4e9, 6e9, 7e9, 8e9]
            .iter()
            .map(|&f| {
                let w = 2.0 * PI * f;
                DiagramPoint::new(w, (w - d0) / gamma_eff(g), 1e-3).unwrap()
            })
            .collect();
        let fit = build_diagram(&pts).unwrap();
        assert_relative_eq!(fit.g, g, max_relative = 1e-10);
        assert_relative_eq!(fit.delta_0, d0, max_relative = 1e-10);
        // scale consistency
        let k = 1.7;
        let scaled: Vec<DiagramPoint> = pts
            .iter()
            .map(|p| DiagramPoint::new(p.omega_r * k, p.b_feature * k, p.sigma_b * k).unwrap())
            .collect();
        let s = build_diagram(&scaled).unwrap();
        assert_relative_eq!(s.g, fit.g, max_relative = 1e-10);
        assert_relative_eq!(s.delta_0, fit.delta_0 * k, max_relative = 1e-9);
    }

    #[test]
    fn diagram_degenerate_inputs() {
        let p = DiagramPoint::new(W8, 0.3, 1e-3).unwrap();
        assert!(build_diagram(&[p]).is_err());
        let q = DiagramPoint::new(W8 * 1.1, 0.3, 1e-3).unwrap();
        assert!(build_diagram(&[p, p]).is_err());
        assert!(build_diagram(&[p, q]).is_err()); // flat in field: slope 0
    }

    #[test]
    fn species_matching() {
        let oh =
            SpinSpecies::new("OH radical", 2.0, 0.0, 1e9, LineShape::Lorentzian, None).unwrap();
        let m = identify_species(2.0, 0.0, std::slice::from_ref(&oh)).unwrap();
        assert!(m.score > 0.9);
        assert!(identify_species(2.0, 0.0, &[]).is_err());
        let far = identify_species(4.0, 0.0, &[oh]).unwrap();
        assert!(far.score < 1e-10);
    }
}

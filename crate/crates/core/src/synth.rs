//! Seeded forward-model generator for traces, loss curves and whole field
//! sweep campaigns with known ground truth.
//!
//! Noise is additive complex Gaussian with equal variance in both
//! quadratures. Every trace draws from its own ChaCha stream derived from the
//! scenario seed and the trace index, so output does not depend on the order
//! or parallelism of generation.

use std::path::{Path, PathBuf};

use num_complex::Complex64;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::constants::gamma_eff;
use crate::error::{Error, Result};
use crate::resfit::MIN_SPAN_LINEWIDTHS;
use crate::spinmodel::{
    boltzmann_satellite_amplitudes, collective_coupling_sq, delta_s, field_for_frequency,
    hyperfine_satellite_fields, kappa_s, loaded_response, satellite_transitions,
    transition_frequency, zeeman_frequency, HyperfineSystem, LossConvention, SpinBathParams,
};
use crate::sweep::{LossCurve, Template, DEFAULT_B_WIREBOND};
use crate::trace_io::{
    write_csv_trace, write_manifest, write_participation, ManifestEntry, ParticipationRow,
    ParticipationTable, Surface, SweepManifest,
};
use crate::types::{ComplexTrace, LineShape, ProbeGeometry, SpinSpecies};

/// Default share of a hyperfine species' coupling carried by its satellites.
pub const DEFAULT_HYPERFINE_FRACTION: f64 = 2.0 / 3.0;

/// Forward-model parameters of one trace.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ResonanceParams {
    /// Bare resonance frequency, rad/s.
    pub omega_r: f64,
    pub q_i: f64,
    pub q_c: f64,
    pub phi_0: f64,
    pub geometry: ProbeGeometry,
    /// Electrical delay, seconds.
    pub tau: f64,
    pub s_inf: Complex64,
    /// Loss added to `omega_r / Q_i` (spins, wire bonds), 1/s.
    pub extra_loss: f64,
    /// Dispersive pull `delta`, rad/s.
    pub shift: f64,
}

impl ResonanceParams {
    pub fn new(omega_r: f64, q_i: f64, q_c: f64, geometry: ProbeGeometry) -> Result<Self> {
        for (name, v) in [("omega_r", omega_r), ("Q_i", q_i), ("Q_c", q_c)] {
            if !(v > 0.0 && v.is_finite()) {
                return Err(Error::invalid(
                    "resonance",
                    format!("{name} must be positive, got {v}"),
                ));
            }
        }
        Ok(ResonanceParams {
            omega_r,
            q_i,
            q_c,
            phi_0: 0.0,
            geometry,
            tau: 0.0,
            s_inf: Complex64::new(1.0, 0.0),
            extra_loss: 0.0,
            shift: 0.0,
        })
    }

    pub fn with_phi_0(mut self, phi_0: f64) -> Self {
        self.phi_0 = phi_0;
        self
    }

    pub fn with_delay(mut self, tau: f64) -> Self {
        self.tau = tau;
        self
    }

    pub fn with_s_inf(mut self, s_inf: Complex64) -> Self {
        self.s_inf = s_inf;
        self
    }

    /// Add the loss and pull of a spin bath at the bare resonance frequency.
    pub fn with_bath(mut self, bath: &SpinBathParams) -> Self {
        self.extra_loss += bath.kappa_s(self.omega_r);
        self.shift += bath.delta_s(self.omega_r);
        self
    }

    /// Bare loaded quality factor.
    pub fn q_l(&self) -> f64 {
        1.0 / (1.0 / self.q_i + 1.0 / self.q_c)
    }

    /// Total loss rate including the extra loss, 1/s.
    pub fn kappa_total(&self) -> f64 {
        self.omega_r / self.q_i + self.extra_loss + self.omega_r / self.q_c
    }

    /// Noiseless measured response at `omega`.
    pub fn response(&self, omega: f64) -> Complex64 {
        let r = loaded_response(
            omega,
            self.omega_r,
            self.omega_r / self.q_i + self.extra_loss,
            self.omega_r / self.q_c,
            self.shift,
            self.phi_0,
            self.geometry,
        );
        self.s_inf * Complex64::from_polar(1.0, omega * self.tau) * r
    }
}

/// `n` frequencies (Hz) spanning `span_linewidths` bare linewidths centered
/// on the resonance.
pub fn frequency_grid(omega_r: f64, q_l: f64, span_linewidths: f64, n: usize) -> Vec<f64> {
    let kappa = omega_r / q_l;
    (0..n)
        .map(|i| {
            let x = i as f64 / (n.max(2) - 1) as f64 - 0.5;
            crate::rad_to_hz(omega_r + x * span_linewidths * kappa)
        })
        .collect()
}

/// Per-quadrature noise level (relative to `|s_inf|`) for a given ratio of
/// off-resonant signal power to total noise power.
pub fn noise_sigma_for_snr_db(snr_db: f64) -> f64 {
    10f64.powf(-snr_db / 20.0) / 2f64.sqrt()
}

/// Independent generator for stream `stream` of `seed`.
pub fn stream_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

fn complex_noise(rng: &mut ChaCha8Rng, sigma: f64) -> Complex64 {
    let re: f64 = StandardNormal.sample(rng);
    let im: f64 = StandardNormal.sample(rng);
    Complex64::new(re, im) * sigma
}

fn trace_with_rng(
    params: &ResonanceParams,
    freq_grid: &[f64],
    noise_sigma: f64,
    rng: &mut ChaCha8Rng,
) -> Result<ComplexTrace> {
    if freq_grid.len() < 2 {
        return Err(Error::invalid("frequency grid", "fewer than 2 points"));
    }
    if !(noise_sigma >= 0.0 && noise_sigma.is_finite()) {
        return Err(Error::invalid("noise", "sigma must be >= 0"));
    }
    let span = crate::hz_to_rad(freq_grid[freq_grid.len() - 1] - freq_grid[0]);
    let widths = span / params.kappa_total();
    if !(widths >= MIN_SPAN_LINEWIDTHS) {
        return Err(Error::invalid(
            "frequency grid",
            format!("spans {widths:.2} linewidths, at least {MIN_SPAN_LINEWIDTHS} required"),
        ));
    }
    let sigma = noise_sigma * params.s_inf.norm();
    let s = freq_grid
        .iter()
        .map(|&f| {
            let clean = params.response(crate::hz_to_rad(f));
            if sigma > 0.0 {
                clean + complex_noise(rng, sigma)
            } else {
                clean
            }
        })
        .collect();
    ComplexTrace::new(freq_grid.to_vec(), s)
}

/// Forward-model trace with additive complex Gaussian noise of standard
/// deviation `noise_sigma * |s_inf|` per quadrature.
pub fn synth_trace(
    params: &ResonanceParams,
    freq_grid: &[f64],
    noise_sigma: f64,
    seed: u64,
) -> Result<ComplexTrace> {
    trace_with_rng(params, freq_grid, noise_sigma, &mut stream_rng(seed, 0))
}

/// Sum of templates sampled at `fields` plus Gaussian noise of absolute
/// standard deviation `noise_sigma` (1/s), which is also recorded as the
/// per-point uncertainty.
pub fn synth_loss_curve(
    components: &[Template],
    fields: &[f64],
    omega_r: f64,
    noise_sigma: f64,
    seed: u64,
) -> Result<LossCurve> {
    let mut rng = stream_rng(seed, 0);
    let kappa = fields
        .iter()
        .map(|&b| {
            let clean: f64 = components.iter().map(|t| t.eval(b)).sum();
            let n: f64 = StandardNormal.sample(&mut rng);
            clean + noise_sigma * n
        })
        .collect();
    LossCurve::new(
        fields.to_vec(),
        kappa,
        vec![noise_sigma; fields.len()],
        omega_r,
    )
}

/// Static field axis of a scenario.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum FieldGrid {
    Range {
        start_tesla: f64,
        stop_tesla: f64,
        step_tesla: f64,
    },
    List(Vec<f64>),
}

impl FieldGrid {
    pub fn fields(&self) -> Result<Vec<f64>> {
        let v = match *self {
            FieldGrid::Range {
                start_tesla,
                stop_tesla,
                step_tesla,
            } => {
                if !(step_tesla > 0.0 && stop_tesla >= start_tesla) {
                    return Err(Error::invalid(
                        "field grid",
                        "need step > 0 and stop >= start",
                    ));
                }
                let n = ((stop_tesla - start_tesla) / step_tesla + 1e-9).floor() as usize + 1;
                (0..n)
                    .map(|i| start_tesla + i as f64 * step_tesla)
                    .collect()
            }
            FieldGrid::List(ref v) => v.clone(),
        };
        if v.is_empty() || v.iter().any(|b| !(b.is_finite() && *b >= 0.0)) {
            return Err(Error::invalid(
                "field grid",
                "fields must be finite and >= 0",
            ));
        }
        if v.windows(2).any(|w| w[1] <= w[0]) {
            return Err(Error::invalid(
                "field grid",
                "fields must be strictly increasing",
            ));
        }
        Ok(v)
    }
}

fn default_one() -> f64 {
    1.0
}

/// One resonator of a scenario.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SynthResonator {
    pub resonator_id: String,
    pub f_r_hz: f64,
    pub q_i: f64,
    pub q_c: f64,
    pub geometry: ProbeGeometry,
    #[serde(default)]
    pub phi_0: f64,
    #[serde(default)]
    pub tau_ns: f64,
    #[serde(default = "default_one")]
    pub s_inf_abs: f64,
    #[serde(default)]
    pub s_inf_arg: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub p_f: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub p_sc: Option<f64>,
    /// Extra `Q_i` switched on above the wire-bond field.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub q_i_wirebond: Option<f64>,
}

impl SynthResonator {
    pub fn params(&self) -> Result<ResonanceParams> {
        Ok(ResonanceParams::new(
            crate::hz_to_rad(self.f_r_hz),
            self.q_i,
            self.q_c,
            self.geometry,
        )?
        .with_phi_0(self.phi_0)
        .with_delay(self.tau_ns * 1e-9)
        .with_s_inf(Complex64::from_polar(self.s_inf_abs, self.s_inf_arg)))
    }
}

fn default_thickness_nm() -> f64 {
    3.0
}

/// A spin species of a scenario with its coupling.
///
/// The coupling is either a fixed `g_ens_hz` or a surface density that is
/// turned into `g_ens` per resonator through its participation ratio.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SynthSpecies {
    pub species: SpinSpecies,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub g_ens_hz: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub surface_density_cm2: Option<f64>,
    #[serde(default = "default_thickness_nm")]
    pub thickness_nm: f64,
    #[serde(default)]
    pub surface: Surface,
    /// Share of the coupling carried by the two hyperfine satellites.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub hyperfine_fraction: Option<f64>,
    /// Populates the satellites with Boltzmann weights; equal weights if absent.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub spin_temperature_k: Option<f64>,
}

fn default_samples() -> usize {
    401
}

fn default_span() -> f64 {
    20.0
}

fn default_b_wirebond() -> f64 {
    DEFAULT_B_WIREBOND
}

/// A complete synthetic campaign.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SynthScenario {
    pub seed: u64,
    /// Per-quadrature noise relative to `|s_inf|`.
    pub noise_sigma: f64,
    pub field_grid: FieldGrid,
    pub resonators: Vec<SynthResonator>,
    #[serde(default)]
    pub species: Vec<SynthSpecies>,
    #[serde(default = "default_samples")]
    pub samples: usize,
    /// Frequency span of each trace in bare linewidths.
    #[serde(default = "default_span")]
    pub span_linewidths: f64,
    #[serde(default = "default_b_wirebond")]
    pub b_wirebond_tesla: f64,
    /// How a planted surface density maps onto `g_ens`.
    #[serde(default)]
    pub convention: LossConvention,
}

impl SynthScenario {
    pub fn from_json(text: &str) -> serde_json::Result<Self> {
        serde_json::from_str(text)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text).map_err(|source| Error::Json {
            path: path.to_path_buf(),
            source,
        })
    }

    pub fn validate(&self) -> Result<()> {
        self.field_grid.fields()?;
        if self.resonators.is_empty() {
            return Err(Error::invalid("scenario", "no resonators"));
        }
        if self.samples < crate::resfit::MIN_FIT_SAMPLES {
            return Err(Error::invalid("scenario", "too few samples per trace"));
        }
        let mut ids: Vec<&str> = self
            .resonators
            .iter()
            .map(|r| r.resonator_id.as_str())
            .collect();
        ids.sort_unstable();
        if ids.windows(2).any(|w| w[0] == w[1]) {
            return Err(Error::invalid("scenario", "duplicate resonator_id"));
        }
        for r in &self.resonators {
            if r.resonator_id.is_empty() || r.resonator_id.contains(['/', '\\', ',']) {
                return Err(Error::invalid(
                    "scenario",
                    format!("unusable resonator_id `{}`", r.resonator_id),
                ));
            }
            r.params()?;
        }
        for s in &self.species {
            if s.g_ens_hz.is_some() == s.surface_density_cm2.is_some() {
                return Err(Error::invalid(
                    "scenario",
                    format!(
                        "species `{}` needs exactly one of g_ens_hz, surface_density_cm2",
                        s.species.label
                    ),
                ));
            }
            if s.species.shape == LineShape::PlateauStep {
                return Err(Error::invalid(
                    "scenario",
                    format!(
                        "plateau species `{}` cannot be synthesized from spin lines",
                        s.species.label
                    ),
                ));
            }
            if let Some(f) = s.hyperfine_fraction {
                if !(0.0..=1.0).contains(&f) {
                    return Err(Error::invalid(
                        "scenario",
                        "hyperfine_fraction outside [0, 1]",
                    ));
                }
            }
        }
        Ok(())
    }
}

/// One spin line seen by one resonator.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LineTruth {
    pub species_label: String,
    /// `central`, `low-field satellite` or `high-field satellite`.
    pub component: String,
    pub g_ens_rad_s: f64,
    pub linewidth_rad_s: f64,
    /// Field where the line crosses the resonator, tesla.
    pub center_field_tesla: f64,
    /// Half width at half maximum in field, tesla.
    pub hwhm_field_tesla: f64,
    /// `16 g^2 / Gamma`, 1/s.
    pub peak_height_rad_s: f64,
    /// `int kappa_s / w_r dB0`, tesla.
    pub area_tesla: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FieldTruth {
    pub b0_tesla: f64,
    pub kappa_s_rad_s: f64,
    pub delta_s_rad_s: f64,
    pub kappa_wirebond_rad_s: f64,
    pub trace_path: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResonatorTruth {
    pub resonator: SynthResonator,
    pub manifest_path: String,
    pub lines: Vec<LineTruth>,
    pub fields: Vec<FieldTruth>,
}

/// Ground truth written next to a campaign as `truth.json`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CampaignTruth {
    pub seed: u64,
    pub noise_sigma: f64,
    pub convention: LossConvention,
    pub b_wirebond_tesla: f64,
    pub resonators: Vec<ResonatorTruth>,
}

impl CampaignTruth {
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        serde_json::from_str(&text).map_err(|source| Error::Json {
            path: path.to_path_buf(),
            source,
        })
    }
}

/// A spin line with its frequency as a function of field.
#[derive(Debug, Clone)]
struct Line {
    truth: LineTruth,
    kind: LineKind,
}

#[derive(Debug, Clone)]
enum LineKind {
    Zeeman(SpinSpecies),
    Hyperfine(HyperfineSystem, (usize, usize)),
}

impl Line {
    fn omega_s(&self, b0: f64) -> Result<f64> {
        match &self.kind {
            LineKind::Zeeman(sp) => zeeman_frequency(sp, b0),
            LineKind::Hyperfine(hf, pair) => Ok(transition_frequency(hf, *pair, b0)),
        }
    }
}

fn coupling_sq(
    s: &SynthSpecies,
    r: &SynthResonator,
    omega_r: f64,
    convention: LossConvention,
) -> Result<f64> {
    if let Some(g) = s.g_ens_hz {
        let g = crate::hz_to_rad(g);
        return Ok(g * g);
    }
    let density = s.surface_density_cm2.unwrap_or(0.0) * 1e4;
    let p = match s.surface {
        Surface::PF => r.p_f,
        Surface::PSc => r.p_sc,
    }
    .ok_or_else(|| {
        Error::invalid(
            "scenario",
            format!(
                "resonator `{}` lacks the participation ratio for `{}`",
                r.resonator_id, s.species.label
            ),
        )
    })?;
    let c_volume = density / (s.thickness_nm * 1e-9);
    // the published integral is half the exact one; plant accordingly
    let k = convention.integral_prefactor() / 8.0;
    Ok(k * collective_coupling_sq(c_volume, s.species.g, omega_r, p))
}

fn line_truth(
    label: &str,
    component: &str,
    g_sq: f64,
    gamma: f64,
    center: f64,
    slope: f64,
    omega_r: f64,
) -> LineTruth {
    LineTruth {
        species_label: label.to_string(),
        component: component.to_string(),
        g_ens_rad_s: g_sq.sqrt(),
        linewidth_rad_s: gamma,
        center_field_tesla: center,
        hwhm_field_tesla: gamma / (2.0 * slope),
        peak_height_rad_s: 16.0 * g_sq / gamma,
        area_tesla: 8.0 * std::f64::consts::PI * g_sq / (slope * omega_r),
    }
}

fn lines_for(scn: &SynthScenario, r: &SynthResonator) -> Result<Vec<Line>> {
    let omega_r = crate::hz_to_rad(r.f_r_hz);
    let mut lines = Vec::new();
    for s in &scn.species {
        let sp = &s.species;
        let g_sq = coupling_sq(s, r, omega_r, scn.convention)?;
        match sp.hyperfine_a {
            None => {
                let center = field_for_frequency(sp, omega_r)?;
                lines.push(Line {
                    truth: line_truth(
                        &sp.label,
                        "central",
                        g_sq,
                        sp.gamma_line,
                        center,
                        gamma_eff(sp.g),
                        omega_r,
                    ),
                    kind: LineKind::Zeeman(sp.clone()),
                });
            }
            Some(a) => {
                let frac = s.hyperfine_fraction.unwrap_or(DEFAULT_HYPERFINE_FRACTION);
                let hf = HyperfineSystem::new(a, sp.g, 0.0)?;
                let (w_lo, w_hi) = match s.spin_temperature_k {
                    Some(t) => boltzmann_satellite_amplitudes(&hf, omega_r, t)?,
                    None => (1.0, 1.0),
                };
                if frac < 1.0 {
                    let center = field_for_frequency(sp, omega_r)?;
                    lines.push(Line {
                        truth: line_truth(
                            &sp.label,
                            "central",
                            (1.0 - frac) * g_sq,
                            sp.gamma_line,
                            center,
                            gamma_eff(sp.g),
                            omega_r,
                        ),
                        kind: LineKind::Zeeman(sp.clone()),
                    });
                }
                let pairs = satellite_transitions(&hf, omega_r);
                let (b_lo, b_hi) = hyperfine_satellite_fields(&hf, omega_r)?;
                let parts = [
                    ("low-field satellite", pairs[0], b_lo, w_lo),
                    ("high-field satellite", pairs[1], b_hi, w_hi),
                ];
                for (name, pair, center, w) in parts {
                    let share = frac * w / (w_lo + w_hi);
                    let h = 1e-6;
                    let slope = (transition_frequency(&hf, pair, center + h)
                        - transition_frequency(&hf, pair, center - h))
                        / (2.0 * h);
                    lines.push(Line {
                        truth: line_truth(
                            &sp.label,
                            name,
                            share * g_sq,
                            sp.gamma_line,
                            center,
                            slope.abs(),
                            omega_r,
                        ),
                        kind: LineKind::Hyperfine(hf, pair),
                    });
                }
            }
        }
    }
    Ok(lines)
}

/// Spin loss and pull of all lines at one field, 1/s and rad/s.
fn spin_load(lines: &[Line], omega_r: f64, b0: f64) -> Result<(f64, f64)> {
    let mut k = 0.0;
    let mut d = 0.0;
    for l in lines {
        let ws = l.omega_s(b0)?;
        let g = l.truth.g_ens_rad_s;
        k += kappa_s(ws, omega_r, g, l.truth.linewidth_rad_s);
        d += delta_s(ws, omega_r, g, l.truth.linewidth_rad_s);
    }
    Ok((k, d))
}

/// `(B0, trace)` pairs, the lines crossing the resonator and per-field truth.
pub type ResonatorSweep = (Vec<(f64, ComplexTrace)>, Vec<LineTruth>, Vec<FieldTruth>);

/// Traces of one resonator over the scenario's field grid, in field order,
/// with the per-field truth (trace paths left empty).
pub fn synth_resonator_sweep(scn: &SynthScenario, index: usize) -> Result<ResonatorSweep> {
    scn.validate()?;
    let r = scn
        .resonators
        .get(index)
        .ok_or_else(|| Error::invalid("scenario", format!("no resonator #{index}")))?;
    let base = r.params()?;
    let lines = lines_for(scn, r)?;
    let fields = scn.field_grid.fields()?;
    let grid = frequency_grid(base.omega_r, base.q_l(), scn.span_linewidths, scn.samples);
    let generated: Vec<Result<(f64, ComplexTrace, FieldTruth)>> = fields
        .par_iter()
        .enumerate()
        .map(|(k, &b0)| {
            let (ks, ds) = spin_load(&lines, base.omega_r, b0)?;
            let k_wb = match r.q_i_wirebond {
                Some(q) if b0 > scn.b_wirebond_tesla => base.omega_r / q,
                _ => 0.0,
            };
            let mut p = base;
            p.extra_loss = ks + k_wb;
            p.shift = ds;
            let stream = ((index as u64) << 32) | k as u64;
            let trace = trace_with_rng(
                &p,
                &grid,
                scn.noise_sigma,
                &mut stream_rng(scn.seed, stream),
            )?;
            Ok((
                b0,
                trace,
                FieldTruth {
                    b0_tesla: b0,
                    kappa_s_rad_s: ks,
                    delta_s_rad_s: ds,
                    kappa_wirebond_rad_s: k_wb,
                    trace_path: String::new(),
                },
            ))
        })
        .collect();
    let mut traces = Vec::with_capacity(fields.len());
    let mut truth = Vec::with_capacity(fields.len());
    for g in generated {
        let (b0, t, f) = g?;
        traces.push((b0, t));
        truth.push(f);
    }
    Ok((traces, lines.into_iter().map(|l| l.truth).collect(), truth))
}

fn create_dir(path: &Path) -> Result<()> {
    std::fs::create_dir_all(path).map_err(|e| Error::io(path, e))
}

/// Write a campaign: per resonator a directory with `manifest.csv` and CSV
/// traces, a `participation.csv` when every resonator has both ratios, the
/// effective `scenario.json`, and `truth.json`.
pub fn synth_sweep(scn: &SynthScenario, out_dir: impl AsRef<Path>) -> Result<CampaignTruth> {
    let out = out_dir.as_ref();
    scn.validate()?;
    create_dir(out)?;
    let mut resonators = Vec::with_capacity(scn.resonators.len());
    for (i, r) in scn.resonators.iter().enumerate() {
        let (traces, lines, mut fields) = synth_resonator_sweep(scn, i)?;
        let dir = out.join(&r.resonator_id);
        create_dir(&dir)?;
        let mut entries = Vec::with_capacity(traces.len());
        for (k, ((b0, trace), ft)) in traces.iter().zip(fields.iter_mut()).enumerate() {
            let name = format!("trace_{k:04}.csv");
            write_csv_trace(trace, dir.join(&name))?;
            ft.trace_path = format!("{}/{name}", r.resonator_id);
            entries.push(ManifestEntry {
                b0: *b0,
                trace_path: PathBuf::from(name),
            });
        }
        let manifest = SweepManifest {
            resonator_id: r.resonator_id.clone(),
            geometry: r.geometry,
            entries,
            q_i_zero_field: None,
            b_wirebond: scn.b_wirebond_tesla,
            q_i_wirebond: None,
            base_dir: dir.clone(),
        };
        write_manifest(&manifest, dir.join("manifest.csv"))?;
        resonators.push(ResonatorTruth {
            resonator: r.clone(),
            manifest_path: format!("{}/manifest.csv", r.resonator_id),
            lines,
            fields,
        });
    }
    if scn
        .resonators
        .iter()
        .all(|r| r.p_f.is_some() && r.p_sc.is_some())
    {
        let table = ParticipationTable {
            rows: scn
                .resonators
                .iter()
                .map(|r| ParticipationRow {
                    resonator_id: r.resonator_id.clone(),
                    p_f: r.p_f.unwrap_or_default(),
                    p_sc: r.p_sc.unwrap_or_default(),
                })
                .collect(),
        };
        write_participation(&table, out.join("participation.csv"))?;
    }
    let truth = CampaignTruth {
        seed: scn.seed,
        noise_sigma: scn.noise_sigma,
        convention: scn.convention,
        b_wirebond_tesla: scn.b_wirebond_tesla,
        resonators,
    };
    let json = |v: &dyn erased::Json| v.to_json();
    std::fs::write(out.join("scenario.json"), json(scn))
        .map_err(|e| Error::io(out.join("scenario.json"), e))?;
    std::fs::write(out.join("truth.json"), json(&truth))
        .map_err(|e| Error::io(out.join("truth.json"), e))?;
    Ok(truth)
}

mod erased {
    pub trait Json {
        fn to_json(&self) -> String;
    }

    impl<T: serde::Serialize> Json for T {
        fn to_json(&self) -> String {
            serde_json::to_string_pretty(self).expect("serializable") + "\n"
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use std::f64::consts::PI;

    const W8: f64 = 2.0 * PI * 8e9;

    #[test]
    fn critical_coupling_nulls_reflection() {
        let p = ResonanceParams::new(W8, 1e5, 1e5, ProbeGeometry::REFLECTION).unwrap();
        assert!(p.response(W8).norm() < 1e-15);
    }

    #[test]
    fn hanger_depth() {
        let p = ResonanceParams::new(W8, 1e12, 2e5, ProbeGeometry::HANGER).unwrap();
        let depth = p.response(W8).norm();
        assert_relative_eq!(depth, 1.0 - p.q_l() / p.q_c, max_relative = 1e-9);
        let q = ResonanceParams::new(W8, 3e5, 2e5, ProbeGeometry::HANGER).unwrap();
        assert_relative_eq!(
            q.response(W8).norm(),
            1.0 - q.q_l() / q.q_c,
            max_relative = 1e-12
        );
    }

    #[test]
    fn narrow_grid_rejected() {
        let p = ResonanceParams::new(W8, 1e5, 1e5, ProbeGeometry::REFLECTION).unwrap();
        let grid = frequency_grid(W8, p.q_l(), 4.0, 101);
        assert!(synth_trace(&p, &grid, 0.0, 1).is_err());
        let grid = frequency_grid(W8, p.q_l(), 6.5, 101);
        assert!(synth_trace(&p, &grid, 0.0, 1).is_ok());
    }

    #[test]
    fn seeded_noise_is_reproducible() {
        let p = ResonanceParams::new(W8, 1e5, 1e5, ProbeGeometry::REFLECTION).unwrap();
        let grid = frequency_grid(W8, p.q_l(), 20.0, 201);
        let a = synth_trace(&p, &grid, 0.01, 7).unwrap();
        let b = synth_trace(&p, &grid, 0.01, 7).unwrap();
        let c = synth_trace(&p, &grid, 0.01, 8).unwrap();
        assert_eq!(a, b);
        assert_ne!(a, c);
    }

    #[test]
    fn noise_level_matches_sigma() {
        let p = ResonanceParams::new(W8, 1e5, 1e5, ProbeGeometry::REFLECTION)
            .unwrap()
            .with_s_inf(Complex64::new(0.0, 2.0));
        let grid = frequency_grid(W8, p.q_l(), 20.0, 20_000);
        let t = synth_trace(&p, &grid, 0.01, 3).unwrap();
        let var: f64 = t
            .iter()
            .map(|(f, z)| (z - p.response(crate::hz_to_rad(f))).norm_sqr())
            .sum::<f64>()
            / (2.0 * t.len() as f64);
        assert_relative_eq!(var.sqrt(), 0.02, max_relative = 0.03);
        assert_relative_eq!(
            noise_sigma_for_snr_db(30.0),
            0.022360679774997897,
            max_relative = 1e-12
        );
    }

    #[test]
    fn field_grid_forms() {
        let r = FieldGrid::Range {
            start_tesla: 0.0,
            stop_tesla: 0.35,
            step_tesla: 0.0005,
        };
        let f = r.fields().unwrap();
        assert_eq!(f.len(), 701);
        assert_relative_eq!(f[700], 0.35, max_relative = 1e-12);
        assert!(FieldGrid::List(vec![0.2, 0.1]).fields().is_err());
        let json = r#"{"start_tesla":0,"stop_tesla":0.1,"step_tesla":0.05}"#;
        let parsed: FieldGrid = serde_json::from_str(json).unwrap();
        assert_eq!(parsed.fields().unwrap().len(), 3);
        let list: FieldGrid = serde_json::from_str("[0.0, 0.1]").unwrap();
        assert_eq!(list.fields().unwrap(), vec![0.0, 0.1]);
    }
}

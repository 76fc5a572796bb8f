//! Forward physics of a resonator loaded by a paramagnetic spin bath.
//!
//! Covers the spin-induced loss and dispersive shift in the small
//! cooperativity limit, the linear Zeeman line of a spin species, the
//! Breit-Rabi level structure of an electron spin 1/2 coupled to a nuclear
//! spin 1/2, and the spin temperature read from hyperfine satellite
//! amplitudes.

use std::f64::consts::PI;

use nalgebra::{Matrix4, SymmetricEigen};
use num_complex::Complex64;
use serde::{Deserialize, Serialize};

use crate::constants::{gamma_eff, HBAR, K_B, MU_0};
use crate::error::{Error, Result};
use crate::optim::bisect_root;
use crate::types::{ProbeGeometry, SpinSpecies};

/// Cooperativity below which the perturbative loss formula is trusted.
pub const SMALL_COOPERATIVITY: f64 = 0.1;

/// Upper end of the field range searched for hyperfine transitions, tesla.
pub const MAX_SEARCH_FIELD: f64 = 2.0;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SpinBathParams {
    /// Collective coupling, rad/s.
    pub g_ens: f64,
    /// Inhomogeneous linewidth (FWHM), rad/s.
    pub gamma_line: f64,
    /// Spin transition frequency, rad/s.
    pub omega_s: f64,
}

impl SpinBathParams {
    pub fn new(g_ens: f64, gamma_line: f64, omega_s: f64) -> Result<Self> {
        if !(g_ens.is_finite() && g_ens >= 0.0) {
            return Err(Error::invalid(
                "spin bath",
                format!("g_ens must be >= 0, got {g_ens}"),
            ));
        }
        if !(gamma_line.is_finite() && gamma_line > 0.0) {
            return Err(Error::invalid("spin bath", "linewidth must be positive"));
        }
        if !omega_s.is_finite() {
            return Err(Error::invalid("spin bath", "non-finite spin frequency"));
        }
        Ok(SpinBathParams {
            g_ens,
            gamma_line,
            omega_s,
        })
    }

    /// `4 g_ens^2 / (kappa Gamma)` for total resonator loss rate `kappa`.
    pub fn cooperativity(&self, kappa: f64) -> f64 {
        4.0 * self.g_ens * self.g_ens / (kappa * self.gamma_line)
    }

    /// Whether the bath is weak enough for the perturbative response.
    pub fn is_small_cooperativity(&self, kappa: f64) -> bool {
        self.cooperativity(kappa) < SMALL_COOPERATIVITY
    }

    pub fn kappa_s(&self, omega_r: f64) -> f64 {
        kappa_s(self.omega_s, omega_r, self.g_ens, self.gamma_line)
    }

    pub fn delta_s(&self, omega_r: f64) -> f64 {
        delta_s(self.omega_s, omega_r, self.g_ens, self.gamma_line)
    }
}

/// Spin-induced loss rate `4 g^2 Gamma / ((w_s - w_r)^2 + Gamma^2/4)`, 1/s.
pub fn kappa_s(omega_s: f64, omega_r: f64, g_ens: f64, gamma_line: f64) -> f64 {
    let det = omega_s - omega_r;
    4.0 * g_ens * g_ens * gamma_line / (det * det + 0.25 * gamma_line * gamma_line)
}

/// Dispersive pull `4 g^2 (w_s - w_r) / ((w_s - w_r)^2 + Gamma^2/4)`, rad/s.
///
/// Odd in the detuning, with extrema `+-4 g^2 / Gamma` at `|w_s - w_r| = Gamma/2`.
pub fn delta_s(omega_s: f64, omega_r: f64, g_ens: f64, gamma_line: f64) -> f64 {
    let det = omega_s - omega_r;
    4.0 * g_ens * g_ens * det / (det * det + 0.25 * gamma_line * gamma_line)
}

/// Bare or loaded resonator response written with rates.
///
/// `1 - r kappa_c e^{i phi_0} / (kappa_int + kappa_c + 2i (w - w_r + delta))`
/// where `kappa_int` already includes any spin loss. With `delta = 0` this is
/// the standard reflection/hanger circle model (`kappa = w_r / Q_l`,
/// `kappa_c = w_r / Q_c`). The bath repels the mode: a spin line above the
/// resonator (`delta > 0`) pulls the resonance down.
pub fn loaded_response(
    omega: f64,
    omega_r: f64,
    kappa_int: f64,
    kappa_c: f64,
    delta: f64,
    phi_0: f64,
    geometry: ProbeGeometry,
) -> Complex64 {
    let kappa = kappa_int + kappa_c;
    let num = Complex64::from_polar(geometry.r_factor() * kappa_c, phi_0);
    let den = Complex64::new(kappa, 2.0 * (omega - omega_r + delta));
    Complex64::new(1.0, 0.0) - num / den
}

/// Response of a resonator loaded by one spin bath (`phi_0 = 0`).
pub fn spin_loaded_response(
    omega: f64,
    omega_r: f64,
    kappa_i: f64,
    kappa_c: f64,
    bath: &SpinBathParams,
    geometry: ProbeGeometry,
) -> Complex64 {
    loaded_response(
        omega,
        omega_r,
        kappa_i + bath.kappa_s(omega_r),
        kappa_c,
        bath.delta_s(omega_r),
        0.0,
        geometry,
    )
}

/// Spin transition frequency `Delta_0 + g mu_B B / hbar`, rad/s.
pub fn zeeman_frequency(species: &SpinSpecies, b0: f64) -> Result<f64> {
    if !(b0.is_finite() && b0 >= 0.0) {
        return Err(Error::invalid("field", format!("must be >= 0, got {b0}")));
    }
    Ok(species.delta_0 + gamma_eff(species.g) * b0)
}

/// Field at which `species` is resonant with `omega_r`, tesla.
pub fn field_for_frequency(species: &SpinSpecies, omega_r: f64) -> Result<f64> {
    if !(omega_r > species.delta_0) {
        return Err(Error::invalid(
            "frequency",
            format!(
                "resonator at {:.4} GHz is not above the zero-field splitting {:.4} GHz of `{}`",
                crate::rad_to_hz(omega_r) / 1e9,
                crate::rad_to_hz(species.delta_0) / 1e9,
                species.label
            ),
        ));
    }
    Ok((omega_r - species.delta_0) / gamma_eff(species.g))
}

/// Electron spin 1/2 coupled to a nuclear spin 1/2.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct HyperfineSystem {
    /// Isotropic hyperfine coupling, rad/s.
    pub a: f64,
    /// Electron g-value.
    pub g_e: f64,
    /// Nuclear Zeeman coefficient, rad/s/T (0 disables the term).
    pub g_n_term: f64,
}

impl HyperfineSystem {
    pub fn new(a: f64, g_e: f64, g_n_term: f64) -> Result<Self> {
        if !(a.is_finite() && a > 0.0) {
            return Err(Error::invalid("hyperfine system", "A must be positive"));
        }
        if !(g_e.is_finite() && g_e > 0.0) {
            return Err(Error::invalid("hyperfine system", "g_e must be positive"));
        }
        if !g_n_term.is_finite() {
            return Err(Error::invalid(
                "hyperfine system",
                "non-finite nuclear term",
            ));
        }
        Ok(HyperfineSystem { a, g_e, g_n_term })
    }

    /// Atomic hydrogen with `g_e = 2` and no nuclear Zeeman term.
    pub fn hydrogen(a_ghz: f64) -> Self {
        HyperfineSystem {
            a: crate::hz_to_rad(a_ghz * 1e9),
            g_e: 2.0,
            g_n_term: 0.0,
        }
    }

    /// `H / hbar` in the product basis `|up up>, |up dn>, |dn up>, |dn dn>`
    /// (electron first), rad/s.
    pub fn hamiltonian(&self, b0: f64) -> Matrix4<f64> {
        let ze = 0.5 * gamma_eff(self.g_e) * b0;
        let zn = 0.5 * self.g_n_term * b0;
        let q = 0.25 * self.a;
        let mut h = Matrix4::zeros();
        h[(0, 0)] = q + ze - zn;
        h[(1, 1)] = -q + ze + zn;
        h[(2, 2)] = -q - ze - zn;
        h[(3, 3)] = q - ze + zn;
        h[(1, 2)] = 0.5 * self.a;
        h[(2, 1)] = 0.5 * self.a;
        h
    }

    /// Eigenvalues (rad/s, ascending) and matching eigenvectors as columns.
    pub fn eigensystem(&self, b0: f64) -> ([f64; 4], Matrix4<f64>) {
        let eig = SymmetricEigen::new(self.hamiltonian(b0));
        let mut order = [0usize, 1, 2, 3];
        order.sort_by(|&i, &j| eig.eigenvalues[i].total_cmp(&eig.eigenvalues[j]));
        let mut values = [0.0; 4];
        let mut vectors = Matrix4::zeros();
        for (k, &i) in order.iter().enumerate() {
            values[k] = eig.eigenvalues[i];
            vectors.set_column(k, &eig.eigenvectors.column(i));
        }
        (values, vectors)
    }
}

/// Four hyperfine energies at field `b0`, joules, ascending.
pub fn breit_rabi_levels(hf: &HyperfineSystem, b0: f64) -> Result<[f64; 4]> {
    if !(b0.is_finite() && b0 >= 0.0) {
        return Err(Error::invalid("field", format!("must be >= 0, got {b0}")));
    }
    let (values, _) = hf.eigensystem(b0);
    Ok(values.map(|w| HBAR * w))
}

/// Electron `S_x` in the product basis.
fn electron_sx() -> Matrix4<f64> {
    let mut sx = Matrix4::zeros();
    // <up m|S_x|dn m> = 1/2 for each nuclear projection m
    sx[(0, 2)] = 0.5;
    sx[(2, 0)] = 0.5;
    sx[(1, 3)] = 0.5;
    sx[(3, 1)] = 0.5;
    sx
}

/// One allowed transition between hyperfine levels.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct HyperfineTransition {
    /// Index of the lower level (ascending energy order).
    pub lower: usize,
    pub upper: usize,
    /// Transition frequency, rad/s.
    pub omega: f64,
    /// `|<lower|S_x|upper>|^2`.
    pub strength: f64,
}

/// All six level pairs at `b0`, strongest `S_x` matrix element first.
pub fn transitions(hf: &HyperfineSystem, b0: f64) -> Vec<HyperfineTransition> {
    let (values, vectors) = hf.eigensystem(b0);
    let sx = electron_sx();
    let mut out = Vec::with_capacity(6);
    for lower in 0..4 {
        for upper in lower + 1..4 {
            let elem = vectors.column(lower).dot(&(sx * vectors.column(upper)));
            out.push(HyperfineTransition {
                lower,
                upper,
                omega: values[upper] - values[lower],
                strength: elem * elem,
            });
        }
    }
    out.sort_by(|a, b| b.strength.total_cmp(&a.strength));
    out
}

/// The two electron-spin-flip transitions that produce the hyperfine
/// satellites, identified by `S_x` strength at a field where the electron
/// Zeeman energy dominates. Returned as `[low-field line, high-field line]`.
pub fn satellite_transitions(hf: &HyperfineSystem, omega_r: f64) -> [(usize, usize); 2] {
    let b_ref = omega_r / gamma_eff(hf.g_e);
    let b_id = b_ref.max(10.0 * hf.a / gamma_eff(hf.g_e));
    let t = transitions(hf, b_id);
    let (mut first, mut second) = (t[0], t[1]);
    // the higher-frequency transition meets the resonator at lower field
    if first.omega < second.omega {
        std::mem::swap(&mut first, &mut second);
    }
    [(first.lower, first.upper), (second.lower, second.upper)]
}

/// Frequency of the transition between eigenlevels `pair` at field `b0`, rad/s.
pub fn transition_frequency(hf: &HyperfineSystem, pair: (usize, usize), b0: f64) -> f64 {
    let (values, _) = hf.eigensystem(b0);
    values[pair.1] - values[pair.0]
}

/// Fields `(B_low, B_high)` where the two satellite transitions are resonant
/// with `omega_r`, tesla.
pub fn hyperfine_satellite_fields(hf: &HyperfineSystem, omega_r: f64) -> Result<(f64, f64)> {
    let pairs = satellite_transitions(hf, omega_r);
    let mut fields = [0.0; 2];
    for (k, &pair) in pairs.iter().enumerate() {
        fields[k] = bisect_root(
            |b| transition_frequency(hf, pair, b) - omega_r,
            0.0,
            MAX_SEARCH_FIELD,
        )
        .ok_or_else(|| {
            Error::numerical(
                "hyperfine",
                format!(
                    "no field in [0, {MAX_SEARCH_FIELD}] T brings transition {}-{} to {:.4} GHz",
                    pair.0,
                    pair.1,
                    crate::rad_to_hz(omega_r) / 1e9
                ),
            )
        })?;
    }
    Ok((fields[0], fields[1]))
}

/// Energy gap between the two lowest hyperfine levels at the mean satellite
/// field, joules.
fn lower_level_gap(hf: &HyperfineSystem, omega_r: f64) -> Result<f64> {
    let (b_low, b_high) = hyperfine_satellite_fields(hf, omega_r)?;
    let levels = breit_rabi_levels(hf, 0.5 * (b_low + b_high))?;
    Ok(levels[1] - levels[0])
}

/// Spin temperature from the two satellite peak amplitudes, kelvin.
///
/// The amplitude ratio `high/low` is read as the Boltzmann ratio of the two
/// lowest hyperfine levels evaluated at the mean satellite field.
pub fn spin_temperature(
    amp_low_field_peak: f64,
    amp_high_field_peak: f64,
    hf: &HyperfineSystem,
    omega_r: f64,
) -> Result<f64> {
    if !(amp_low_field_peak > 0.0 && amp_high_field_peak > 0.0) {
        return Err(Error::invalid(
            "satellite amplitudes",
            "both must be positive",
        ));
    }
    let gap = lower_level_gap(hf, omega_r)?;
    let ratio = amp_high_field_peak / amp_low_field_peak;
    if ratio == 1.0 {
        return Err(Error::numerical(
            "spin temperature",
            "equal satellite amplitudes: infinite spin temperature",
        ));
    }
    if ratio > 1.0 {
        return Err(Error::numerical(
            "spin temperature",
            format!("high-field satellite stronger than low-field one (ratio {ratio:.4}): negative temperature"),
        ));
    }
    Ok(gap / (K_B * (1.0 / ratio).ln()))
}

/// Boltzmann populations of the two lowest hyperfine levels at the mean
/// satellite field, normalized over all four levels. These are the satellite
/// amplitudes `(low-field, high-field)` that [`spin_temperature`] inverts.
pub fn boltzmann_satellite_amplitudes(
    hf: &HyperfineSystem,
    omega_r: f64,
    temperature: f64,
) -> Result<(f64, f64)> {
    if !(temperature > 0.0) {
        return Err(Error::invalid("temperature", "must be positive"));
    }
    let (b_low, b_high) = hyperfine_satellite_fields(hf, omega_r)?;
    let levels = breit_rabi_levels(hf, 0.5 * (b_low + b_high))?;
    let weights = levels.map(|e| (-(e - levels[0]) / (K_B * temperature)).exp());
    let z: f64 = weights.iter().sum();
    Ok((weights[0] / z, weights[1] / z))
}

/// Which closed form to use for the field-integrated spin loss.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum LossConvention {
    /// `int kappa_s / w_r dw_s = 4 pi g^2 / w_r`, as published.
    #[default]
    #[serde(alias = "paper4pi")]
    Paper,
    /// `8 pi g^2 / w_r`, the exact integral of [`kappa_s`].
    #[serde(alias = "derived8pi")]
    Derived,
}

impl LossConvention {
    /// Prefactor `k` in `int kappa_s dw_s = k pi g^2`.
    pub fn integral_prefactor(&self) -> f64 {
        match self {
            LossConvention::Paper => 4.0,
            LossConvention::Derived => 8.0,
        }
    }
}

impl std::str::FromStr for LossConvention {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "paper" | "paper4pi" => Ok(LossConvention::Paper),
            "derived" | "derived8pi" => Ok(LossConvention::Derived),
            other => Err(Error::invalid(
                "convention",
                format!("`{other}` (expected paper or derived)"),
            )),
        }
    }
}

/// Spin loss integrated over the spin frequency and divided by `w_r`, rad/s.
pub fn integrated_loss(g_ens: f64, omega_r: f64, convention: LossConvention) -> f64 {
    convention.integral_prefactor() * PI * g_ens * g_ens / omega_r
}

/// Collective coupling squared, (rad/s)^2, of spins at volume concentration
/// `c` (1/m^3) filling a layer of magnetic participation `p`:
/// `c gamma^2 |<1|S_x/2|2>|^2 (mu_0 hbar w_r / 2) p` with the spin-1/2
/// matrix element squared equal to 1/4.
pub fn collective_coupling_sq(c_volume: f64, g: f64, omega_r: f64, participation: f64) -> f64 {
    let gamma = gamma_eff(g);
    c_volume * gamma * gamma * 0.25 * (MU_0 * HBAR * omega_r / 2.0) * participation
}

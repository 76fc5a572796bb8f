//! Domain value types shared by every stage of the analysis.
//!
//! All frequencies are angular (rad/s) and all fields are in tesla. Each type
//! validates its invariants on construction and rejects violations instead
//! of normalizing them.

use std::fmt;
use std::str::FromStr;

use num_complex::Complex64;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum GeometryKind {
    Reflection,
    Hanger,
}

/// How the resonator is probed. The geometry fixes the prefactor of the
/// coupling term in the response: 2 in reflection, 1 in hanger.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct ProbeGeometry {
    kind: GeometryKind,
}

impl ProbeGeometry {
    pub const REFLECTION: ProbeGeometry = ProbeGeometry {
        kind: GeometryKind::Reflection,
    };
    pub const HANGER: ProbeGeometry = ProbeGeometry {
        kind: GeometryKind::Hanger,
    };

    pub fn new(kind: GeometryKind) -> Self {
        ProbeGeometry { kind }
    }

    pub fn kind(&self) -> GeometryKind {
        self.kind
    }

    /// Coupling prefactor `r` of the spin-loaded response (2 reflection, 1 hanger).
    pub fn r_factor(&self) -> f64 {
        match self.kind {
            GeometryKind::Reflection => 2.0,
            GeometryKind::Hanger => 1.0,
        }
    }

    /// Ratio between `Q_l / Q_c` and the circle radius: `Q_c = Q_l / (k R)`
    /// with `k = 1` in reflection and `k = 2` in hanger geometry. The same
    /// factor appears in the circle-radius error propagation for `1/Q_i`.
    pub fn radius_factor(&self) -> f64 {
        match self.kind {
            GeometryKind::Reflection => 1.0,
            GeometryKind::Hanger => 2.0,
        }
    }

    pub fn is_reflection(&self) -> bool {
        self.kind == GeometryKind::Reflection
    }
}

impl fmt::Display for ProbeGeometry {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self.kind {
            GeometryKind::Reflection => f.write_str("reflection"),
            GeometryKind::Hanger => f.write_str("hanger"),
        }
    }
}

impl FromStr for ProbeGeometry {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "reflection" => Ok(Self::REFLECTION),
            "hanger" => Ok(Self::HANGER),
            other => Err(Error::invalid(
                "geometry",
                format!("unknown geometry keyword `{other}` (expected reflection or hanger)"),
            )),
        }
    }
}

/// Frequency-ordered complex scattering samples from one scan.
///
/// Frequencies are stored in Hz as read from the instrument; use
/// [`ComplexTrace::omega`] for angular values.
#[derive(Debug, Clone, PartialEq)]
pub struct ComplexTrace {
    freq: Vec<f64>,
    s: Vec<Complex64>,
}

impl ComplexTrace {
    pub fn new(freq_hz: Vec<f64>, s: Vec<Complex64>) -> Result<Self> {
        if freq_hz.is_empty() {
            return Err(Error::invalid("trace", "no samples"));
        }
        if freq_hz.len() != s.len() {
            return Err(Error::invalid(
                "trace",
                format!(
                    "frequency axis has {} samples but data has {}",
                    freq_hz.len(),
                    s.len()
                ),
            ));
        }
        if let Some(i) = freq_hz.iter().position(|f| !f.is_finite()) {
            return Err(Error::invalid(
                "trace",
                format!("non-finite frequency at sample {i}"),
            ));
        }
        if let Some(i) = s
            .iter()
            .position(|z| !(z.re.is_finite() && z.im.is_finite()))
        {
            return Err(Error::invalid(
                "trace",
                format!("non-finite value at sample {i}"),
            ));
        }
        if freq_hz.windows(2).any(|w| w[1] <= w[0]) {
            return Err(Error::invalid("trace", "non-monotone frequency axis"));
        }
        Ok(ComplexTrace { freq: freq_hz, s })
    }

    pub fn len(&self) -> usize {
        self.freq.len()
    }

    pub fn is_empty(&self) -> bool {
        self.freq.is_empty()
    }

    /// Frequencies in Hz.
    pub fn freq(&self) -> &[f64] {
        &self.freq
    }

    pub fn s(&self) -> &[Complex64] {
        &self.s
    }

    /// Angular frequency of sample `i`, rad/s.
    pub fn omega(&self, i: usize) -> f64 {
        crate::hz_to_rad(self.freq[i])
    }

    pub fn omegas(&self) -> Vec<f64> {
        self.freq.iter().map(|&f| crate::hz_to_rad(f)).collect()
    }

    pub fn iter(&self) -> impl Iterator<Item = (f64, Complex64)> + '_ {
        self.freq.iter().copied().zip(self.s.iter().copied())
    }

    /// Same frequency axis, values transformed sample by sample.
    pub fn map(&self, mut f: impl FnMut(f64, Complex64) -> Complex64) -> Result<Self> {
        let s = self.iter().map(|(fr, z)| f(fr, z)).collect();
        ComplexTrace::new(self.freq.clone(), s)
    }

    pub fn into_parts(self) -> (Vec<f64>, Vec<Complex64>) {
        (self.freq, self.s)
    }
}

/// Result of fitting one resonance.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
#[non_exhaustive]
pub struct ResonatorFit {
    /// Resonance frequency, rad/s.
    pub omega_r: f64,
    pub q_i: f64,
    pub q_c: f64,
    pub q_l: f64,
    /// Impedance-mismatch rotation, rad (zero in reflection).
    pub phi_0: f64,
    /// Circle center in the normalized complex plane.
    pub circle_center: Complex64,
    /// Circle radius in the normalized complex plane.
    pub circle_radius: f64,
    pub sigma_radius: f64,
    /// One-sigma uncertainty of `1/Q_i` from the circle radius.
    pub sigma_inv_qi: f64,
    pub geometry: ProbeGeometry,
}

impl ResonatorFit {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        omega_r: f64,
        q_i: f64,
        q_c: f64,
        q_l: f64,
        phi_0: f64,
        circle_center: Complex64,
        circle_radius: f64,
        sigma_radius: f64,
        sigma_inv_qi: f64,
        geometry: ProbeGeometry,
    ) -> Result<Self> {
        let all = [
            omega_r,
            q_i,
            q_c,
            q_l,
            phi_0,
            circle_center.re,
            circle_center.im,
            circle_radius,
            sigma_radius,
            sigma_inv_qi,
        ];
        if all.iter().any(|v| !v.is_finite()) {
            return Err(Error::invalid("resonator fit", "non-finite field"));
        }
        if omega_r <= 0.0 {
            return Err(Error::invalid("resonator fit", "omega_r must be positive"));
        }
        if q_i <= 0.0 || q_c <= 0.0 || q_l <= 0.0 {
            return Err(Error::invalid(
                "resonator fit",
                format!("quality factors must be positive (Q_i={q_i}, Q_c={q_c}, Q_l={q_l})"),
            ));
        }
        if !(circle_radius > 0.0 && circle_radius <= 1.0) {
            return Err(Error::invalid(
                "resonator fit",
                format!("circle radius {circle_radius} outside (0, 1]"),
            ));
        }
        if sigma_radius < 0.0 || sigma_inv_qi < 0.0 {
            return Err(Error::invalid("resonator fit", "negative uncertainty"));
        }
        let lhs = 1.0 / q_l;
        let rhs = 1.0 / q_i + 1.0 / q_c;
        if ((lhs - rhs) / lhs).abs() > 1e-9 {
            return Err(Error::invalid(
                "resonator fit",
                format!("1/Q_l = {lhs:e} but 1/Q_i + 1/Q_c = {rhs:e}"),
            ));
        }
        Ok(ResonatorFit {
            omega_r,
            q_i,
            q_c,
            q_l,
            phi_0,
            circle_center,
            circle_radius,
            sigma_radius,
            sigma_inv_qi,
            geometry,
        })
    }

    /// Internal loss rate `omega_r / Q_i`, 1/s.
    pub fn kappa_i(&self) -> f64 {
        self.omega_r / self.q_i
    }
}

/// Line-shape family used when decomposing a loss curve.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LineShape {
    Lorentzian,
    AsymmetricSplitLorentzian,
    PlateauStep,
}

/// Spectroscopic identity of a spin system.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "SpinSpeciesFile", into = "SpinSpeciesFile")]
#[non_exhaustive]
pub struct SpinSpecies {
    pub label: String,
    /// Effective g-value.
    pub g: f64,
    /// Zero-field splitting, rad/s.
    pub delta_0: f64,
    /// Inhomogeneous linewidth (FWHM), rad/s.
    pub gamma_line: f64,
    pub shape: LineShape,
    /// Hyperfine coupling, rad/s.
    pub hyperfine_a: Option<f64>,
}

impl SpinSpecies {
    pub fn new(
        label: impl Into<String>,
        g: f64,
        delta_0: f64,
        gamma_line: f64,
        shape: LineShape,
        hyperfine_a: Option<f64>,
    ) -> Result<Self> {
        if !(g.is_finite() && g > 0.0) {
            return Err(Error::invalid(
                "spin species",
                format!("g must be positive, got {g}"),
            ));
        }
        if !(gamma_line.is_finite() && gamma_line > 0.0) {
            return Err(Error::invalid(
                "spin species",
                format!("linewidth must be positive, got {gamma_line}"),
            ));
        }
        if !(delta_0.is_finite() && delta_0 >= 0.0) {
            return Err(Error::invalid(
                "spin species",
                format!("zero-field splitting must be non-negative, got {delta_0}"),
            ));
        }
        if let Some(a) = hyperfine_a {
            if !(a.is_finite() && a > 0.0) {
                return Err(Error::invalid(
                    "spin species",
                    format!("hyperfine coupling must be positive, got {a}"),
                ));
            }
        }
        Ok(SpinSpecies {
            label: label.into(),
            g,
            delta_0,
            gamma_line,
            shape,
            hyperfine_a,
        })
    }
}

/// On-disk form of [`SpinSpecies`] with frequencies in GHz.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct SpinSpeciesFile {
    label: String,
    g: f64,
    delta_0_ghz: f64,
    linewidth_ghz: f64,
    shape: LineShape,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    hyperfine_a_ghz: Option<f64>,
}

impl TryFrom<SpinSpeciesFile> for SpinSpecies {
    type Error = Error;

    fn try_from(f: SpinSpeciesFile) -> Result<Self> {
        SpinSpecies::new(
            f.label,
            f.g,
            crate::hz_to_rad(f.delta_0_ghz * 1e9),
            crate::hz_to_rad(f.linewidth_ghz * 1e9),
            f.shape,
            f.hyperfine_a_ghz.map(|a| crate::hz_to_rad(a * 1e9)),
        )
    }
}

impl From<SpinSpecies> for SpinSpeciesFile {
    fn from(s: SpinSpecies) -> Self {
        SpinSpeciesFile {
            label: s.label,
            g: s.g,
            delta_0_ghz: crate::rad_to_hz(s.delta_0) / 1e9,
            linewidth_ghz: crate::rad_to_hz(s.gamma_line) / 1e9,
            shape: s.shape,
            hyperfine_a_ghz: s.hyperfine_a.map(|a| crate::rad_to_hz(a) / 1e9),
        }
    }
}

/// One resonator fit taken at a given static field.
#[derive(Debug, Clone, Copy, PartialEq)]
#[non_exhaustive]
pub struct FieldSweepPoint {
    /// Static field, tesla.
    pub b0: f64,
    pub fit: ResonatorFit,
}

impl FieldSweepPoint {
    pub fn new(b0: f64, fit: ResonatorFit) -> Result<Self> {
        if !(b0.is_finite() && b0 >= 0.0) {
            return Err(Error::invalid(
                "sweep point",
                format!("field must be >= 0, got {b0}"),
            ));
        }
        Ok(FieldSweepPoint { b0, fit })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn c(re: f64, im: f64) -> Complex64 {
        Complex64::new(re, im)
    }

    #[test]
    fn geometry_factors_follow_kind() {
        assert_eq!(ProbeGeometry::REFLECTION.r_factor(), 2.0);
        assert_eq!(ProbeGeometry::HANGER.r_factor(), 1.0);
        assert_eq!(
            "Reflection".parse::<ProbeGeometry>().unwrap(),
            ProbeGeometry::REFLECTION
        );
        assert!("notch".parse::<ProbeGeometry>().is_err());
    }

    #[test]
    fn trace_rejects_bad_axes() {
        assert!(ComplexTrace::new(vec![1.0, 1.0], vec![c(0., 0.); 2]).is_err());
        assert!(ComplexTrace::new(vec![2.0, 1.0], vec![c(0., 0.); 2]).is_err());
        assert!(ComplexTrace::new(vec![1.0, 2.0], vec![c(f64::NAN, 0.), c(0., 0.)]).is_err());
        assert!(ComplexTrace::new(vec![1.0], vec![]).is_err());
        let err = ComplexTrace::new(vec![2.0, 1.0], vec![c(0., 0.); 2]).unwrap_err();
        assert!(err.to_string().contains("non-monotone frequency axis"));
    }

    #[test]
    fn fit_checks_loaded_q_relation() {
        let g = ProbeGeometry::REFLECTION;
        let ok = ResonatorFit::new(1e10, 2e5, 2e5, 1e5, 0.0, c(0.5, 0.), 0.5, 0., 0., g);
        assert!(ok.is_ok());
        let bad = ResonatorFit::new(1e10, 2e5, 2e5, 1.1e5, 0.0, c(0.5, 0.), 0.5, 0., 0., g);
        assert!(bad.is_err());
        let neg = ResonatorFit::new(1e10, -2e5, 2e5, 1e5, 0.0, c(0.5, 0.), 0.5, 0., 0., g);
        assert!(neg.is_err());
        let big = ResonatorFit::new(1e10, 2e5, 2e5, 1e5, 0.0, c(0.5, 0.), 1.5, 0., 0., g);
        assert!(big.is_err());
    }

    #[test]
    fn species_invariants() {
        assert!(SpinSpecies::new("x", 0.0, 0.0, 1.0, LineShape::Lorentzian, None).is_err());
        assert!(SpinSpecies::new("x", 2.0, -1.0, 1.0, LineShape::Lorentzian, None).is_err());
        assert!(SpinSpecies::new("x", 2.0, 0.0, 0.0, LineShape::Lorentzian, None).is_err());
        assert!(SpinSpecies::new("x", 2.0, 0.0, 1.0, LineShape::Lorentzian, Some(0.0)).is_err());
    }

    #[test]
    fn species_file_uses_ghz() {
        let json = r#"{"label":"film","g":1.85,"delta_0_ghz":0.28,"linewidth_ghz":0.3,"shape":"lorentzian"}"#;
        let s: SpinSpecies = serde_json::from_str(json).unwrap();
        assert!((s.delta_0 - 2.0 * std::f64::consts::PI * 0.28e9).abs() < 1e-3);
        let back = serde_json::to_string(&s).unwrap();
        let again: SpinSpecies = serde_json::from_str(&back).unwrap();
        assert!((again.g - s.g).abs() < 1e-15);
        let bad =
            r#"{"label":"x","g":-1,"delta_0_ghz":0,"linewidth_ghz":0.3,"shape":"lorentzian"}"#;
        assert!(serde_json::from_str::<SpinSpecies>(bad).is_err());
    }

    #[test]
    fn negative_field_rejected() {
        let fit = ResonatorFit::new(
            1e10,
            2e5,
            2e5,
            1e5,
            0.0,
            c(0.5, 0.),
            0.5,
            0.,
            0.,
            ProbeGeometry::REFLECTION,
        )
        .unwrap();
        assert!(FieldSweepPoint::new(-0.1, fit).is_err());
        assert!(FieldSweepPoint::new(0.0, fit).is_ok());
    }
}

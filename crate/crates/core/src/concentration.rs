//! Surface spin concentration from the linear relation between integrated
//! feature area and magnetic participation ratio.

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::constants::{gamma_eff, H, MU_0};
use crate::error::{Error, Result};
use crate::optim::weighted_least_squares;
use crate::spinmodel::LossConvention;
use crate::types::SpinSpecies;

/// Default thickness of the spin-hosting surface layer, meters.
pub const DEFAULT_T_LAYER: f64 = 3e-9;

/// Caveat attached to results computed with the default layer thickness.
pub const T_LAYER_CAVEAT: &str =
    "t = 3 nm is a fair assumption for radicals at the sapphire surface but a rather arbitrary choice for the NbTiN surface";

/// `|<1|S_x/2|2>|^2` for a spin 1/2.
const SPIN_HALF_MATRIX_ELEMENT_SQ: f64 = 0.25;

/// One resonator's feature area and participation ratio.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AreaRow {
    /// `int kappa_s / w_r dB0`, tesla.
    pub area: f64,
    pub participation: f64,
    pub sigma_area: f64,
}

/// Straight-line fit of area against participation.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AreaRegression {
    /// Tesla per unit participation.
    pub slope: f64,
    pub sigma_slope: f64,
    /// Tesla; exactly zero for a through-origin fit.
    pub intercept: f64,
    pub sigma_intercept: f64,
    pub r_squared: f64,
    /// `|intercept| <= 2 sigma_intercept`.
    pub intercept_consistent_with_zero: bool,
    pub through_origin: bool,
}

fn check_rows(rows: &[AreaRow], min: usize) -> Result<()> {
    if rows.len() < min {
        return Err(Error::invalid(
            "area table",
            format!("{} rows, at least {min} required", rows.len()),
        ));
    }
    for r in rows {
        if !(r.area.is_finite()
            && r.participation.is_finite()
            && r.sigma_area.is_finite()
            && r.sigma_area >= 0.0)
        {
            return Err(Error::invalid("area table", "non-finite or negative entry"));
        }
    }
    let p0 = rows[0].participation;
    if rows.iter().all(|r| r.participation == p0) {
        return Err(Error::invalid(
            "area table",
            "zero variance in participation",
        ));
    }
    Ok(())
}

fn regress(rows: &[AreaRow], through_origin: bool) -> Result<AreaRegression> {
    let n = rows.len();
    let w: Vec<f64> = if rows.iter().all(|r| r.sigma_area > 0.0) {
        rows.iter()
            .map(|r| 1.0 / (r.sigma_area * r.sigma_area))
            .collect()
    } else {
        vec![1.0; n]
    };
    let p_scale = rows
        .iter()
        .map(|r| r.participation.abs())
        .fold(0.0, f64::max);
    let ncols = if through_origin { 1 } else { 2 };
    let x = DMatrix::from_fn(n, ncols, |i, j| {
        if j + 1 == ncols {
            rows[i].participation / p_scale
        } else {
            1.0
        }
    });
    let y: Vec<f64> = rows.iter().map(|r| r.area).collect();
    let fit = weighted_least_squares(&x, &y, &w)
        .ok_or_else(|| Error::numerical("area regression", "singular design"))?;
    let dof = n - ncols;
    // covariance scaled by the reduced chi-square when there are spare rows
    let scale = if dof > 0 {
        fit.weighted_rss / dof as f64
    } else {
        1.0
    };
    let k = ncols - 1;
    let slope = fit.beta[k] / p_scale;
    let sigma_slope = (fit.covariance[(k, k)] * scale).sqrt() / p_scale;
    let (intercept, sigma_intercept) = if through_origin {
        (0.0, 0.0)
    } else {
        (fit.beta[0], (fit.covariance[(0, 0)] * scale).sqrt())
    };
    let wsum: f64 = w.iter().sum();
    let tss: f64 = if through_origin {
        (0..n).map(|i| w[i] * y[i] * y[i]).sum()
    } else {
        let mean = (0..n).map(|i| w[i] * y[i]).sum::<f64>() / wsum;
        (0..n).map(|i| w[i] * (y[i] - mean).powi(2)).sum()
    };
    let r_squared = if tss > 0.0 {
        1.0 - fit.weighted_rss / tss
    } else {
        1.0
    };
    // exact data leave round-off in the intercept with a zero error bar
    let roundoff = 1e-9 * slope.abs() * p_scale;
    let intercept_consistent_with_zero = intercept.abs() <= 2.0 * sigma_intercept + roundoff;
    Ok(AreaRegression {
        slope,
        sigma_slope,
        intercept,
        sigma_intercept,
        r_squared,
        intercept_consistent_with_zero,
        through_origin,
    })
}

/// Weighted least squares `area = slope * p + intercept` (weights
/// `1/sigma_area^2` when every row has a positive sigma).
pub fn regress_area_vs_participation(rows: &[AreaRow]) -> Result<AreaRegression> {
    check_rows(rows, 3)?;
    regress(rows, false)
}

/// As [`regress_area_vs_participation`] with the intercept fixed at zero.
pub fn regress_area_through_origin(rows: &[AreaRow]) -> Result<AreaRegression> {
    check_rows(rows, 2)?;
    regress(rows, true)
}

/// Spin concentration inferred from an area-participation slope.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ConcentrationResult {
    /// Spins per cubic meter.
    pub c_volume: f64,
    /// Spins per square meter, `c_volume * t_layer`.
    pub sigma_surface: f64,
    /// One-sigma uncertainty of `sigma_surface`, when the slope error is known.
    pub sigma_surface_err: Option<f64>,
    /// Tesla per unit participation.
    pub slope: f64,
    pub r_squared: Option<f64>,
    /// Meters.
    pub t_layer: f64,
    pub convention: LossConvention,
}

impl ConcentrationResult {
    /// Surface density in spins per square centimeter.
    pub fn sigma_surface_cm2(&self) -> f64 {
        self.sigma_surface * 1e-4
    }
}

/// Area per unit participation and unit volume concentration, `T m^3`:
/// `h mu_0 gamma_e |<1|S_x/2|2>|^2`, doubled in the derived convention.
pub fn slope_per_concentration(g: f64, convention: LossConvention) -> f64 {
    let base = H * MU_0 * gamma_eff(g) * SPIN_HALF_MATRIX_ELEMENT_SQ;
    base * convention.integral_prefactor() / 4.0
}

/// Concentration from the slope of area against participation.
pub fn concentration_from_slope(
    slope: f64,
    species: &SpinSpecies,
    t_layer: f64,
    convention: LossConvention,
) -> Result<ConcentrationResult> {
    if !(slope > 0.0 && slope.is_finite()) {
        return Err(Error::invalid(
            "slope",
            format!("must be positive, got {slope}"),
        ));
    }
    if !(t_layer > 0.0 && t_layer.is_finite()) {
        return Err(Error::invalid("layer thickness", "must be positive"));
    }
    let c_volume = slope / slope_per_concentration(species.g, convention);
    Ok(ConcentrationResult {
        c_volume,
        sigma_surface: c_volume * t_layer,
        sigma_surface_err: None,
        slope,
        r_squared: None,
        t_layer,
        convention,
    })
}

/// Concentration from a fitted regression, carrying its slope error and R².
pub fn concentration_from_regression(
    reg: &AreaRegression,
    species: &SpinSpecies,
    t_layer: f64,
    convention: LossConvention,
) -> Result<ConcentrationResult> {
    let mut res = concentration_from_slope(reg.slope, species, t_layer, convention)?;
    res.sigma_surface_err = Some(res.sigma_surface * reg.sigma_slope / reg.slope);
    res.r_squared = Some(reg.r_squared);
    Ok(res)
}

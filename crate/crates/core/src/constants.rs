//! Physical constants (CODATA 2018, SI).

use std::f64::consts::PI;

/// SI constants used throughout the crate.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PhysicalConstants {
    /// Bohr magneton, J/T.
    pub mu_b: f64,
    /// Reduced Planck constant, J s.
    pub hbar: f64,
    /// Planck constant, J s.
    pub h: f64,
    /// Boltzmann constant, J/K.
    pub k_b: f64,
    /// Vacuum permeability, T^2 m^3 / J.
    pub mu_0: f64,
}

pub const H: f64 = 6.626_070_15e-34;
pub const HBAR: f64 = H / (2.0 * PI);
pub const K_B: f64 = 1.380_649e-23;
pub const MU_B: f64 = 9.274_010_078_3e-24;
pub const MU_0: f64 = 1.256_637_062_12e-6;

impl PhysicalConstants {
    pub const CODATA_2018: PhysicalConstants = PhysicalConstants {
        mu_b: MU_B,
        hbar: HBAR,
        h: H,
        k_b: K_B,
        mu_0: MU_0,
    };

    /// Gyromagnetic ratio `g mu_B / hbar` in rad/s/T.
    pub fn gyromagnetic_ratio(&self, g: f64) -> f64 {
        g * self.mu_b / self.hbar
    }
}

impl Default for PhysicalConstants {
    fn default() -> Self {
        Self::CODATA_2018
    }
}

/// Gyromagnetic ratio `g mu_B / hbar` in rad/s/T with CODATA constants.
pub fn gamma_eff(g: f64) -> f64 {
    g * MU_B / HBAR
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn planck_pair_consistent() {
        let c = PhysicalConstants::default();
        assert!((c.h - 2.0 * PI * c.hbar).abs() <= 4.0 * f64::EPSILON * c.h);
    }

    #[test]
    fn bohr_magneton_in_frequency_units() {
        let c = PhysicalConstants::default();
        let ghz_per_tesla = c.mu_b / c.h / 1e9;
        assert!((ghz_per_tesla - 13.996245).abs() / 13.996245 < 1e-6);
    }
}

//! Analysis chain for superconducting microwave resonators measured under a
//! static magnetic field.
//!
//! The crate turns complex scattering traces into quality factors, quality
//! factors taken along a field sweep into a spin-induced loss curve, and loss
//! curves into spin-species assignments and surface spin concentrations. A
//! forward-model generator ([`synth`]) produces traces and whole campaigns
//! with known ground truth.

// `!(x > 0.0)` guards also reject NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod catalog;
pub mod concentration;
pub mod constants;
pub mod error;
pub mod optim;
pub mod resfit;
pub mod spinmodel;
pub mod sweep;
pub mod synth;
pub mod trace_io;
pub mod types;

pub use constants::PhysicalConstants;
pub use error::{Error, Result};
pub use types::{
    ComplexTrace, FieldSweepPoint, GeometryKind, LineShape, ProbeGeometry, ResonatorFit,
    SpinSpecies,
};

/// Convert a frequency in Hz to angular frequency in rad/s.
#[inline]
pub fn hz_to_rad(f: f64) -> f64 {
    2.0 * std::f64::consts::PI * f
}

/// Convert an angular frequency in rad/s to Hz.
#[inline]
pub fn rad_to_hz(omega: f64) -> f64 {
    omega / (2.0 * std::f64::consts::PI)
}

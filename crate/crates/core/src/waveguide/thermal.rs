//! Doppler detunings from thermal motion along the waveguide.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use std::f64::consts::TAU;

use crate::error::{Error, Result};

/// Boltzmann constant over the ⁸⁷Rb mass, in µm²/(µs²·K).
const KB_OVER_M_RB87: f64 = 1.380649e-23 / (86.909_180_527 * 1.660_539_066_60e-27);

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ThermalMotion {
    /// Spin wavelength imprinted by the probe and control fields (µm).
    pub spin_wavelength: f64,
    /// Most probable speed (µm/µs).
    pub velocity_scale: f64,
}

impl ThermalMotion {
    /// λ = 2π(1/k_p − 1/k_c) for counter-propagating beams (k_c < 0) and
    /// the most probable speed √(2k_BT/m) of ⁸⁷Rb.
    pub fn from_lab(k_p: f64, k_c: f64, temperature: f64) -> Result<Self> {
        if !(k_p != 0.0 && k_c != 0.0) || !(temperature >= 0.0) {
            return Err(Error::invalid("need nonzero wavevectors and T ≥ 0"));
        }
        let spin_wavelength = (TAU * (1.0 / k_p - 1.0 / k_c)).abs();
        let velocity_scale = (2.0 * KB_OVER_M_RB87 * temperature).sqrt();
        let t = ThermalMotion {
            spin_wavelength,
            velocity_scale,
        };
        t.validate()?;
        Ok(t)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.spin_wavelength > 0.0 && self.spin_wavelength.is_finite()) {
            return Err(Error::invalid("spin wavelength must be positive"));
        }
        if !(self.velocity_scale >= 0.0 && self.velocity_scale.is_finite()) {
            return Err(Error::invalid("velocity scale must be non-negative"));
        }
        Ok(())
    }

    /// Standard deviation of the 1D velocity component: v_mp/√2.
    pub fn velocity_sigma(&self) -> f64 {
        self.velocity_scale / 2f64.sqrt()
    }

    /// R.m.s. detuning 2·(2π/λ)·σ_v.
    pub fn rms_detuning(&self) -> f64 {
        2.0 * TAU / self.spin_wavelength * self.velocity_sigma()
    }

    /// Per-atom detunings 2·(2π/λ)·v_j with Gaussian v_j.
    pub fn sample_detunings(&self, n_atoms: usize, seed: u64) -> Result<Vec<f64>> {
        self.validate()?;
        let sigma = self.rms_detuning();
        if sigma == 0.0 {
            return Ok(vec![0.0; n_atoms]);
        }
        let dist = Normal::new(0.0, sigma).map_err(|e| Error::invalid(e.to_string()))?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Ok((0..n_atoms).map(|_| dist.sample(&mut rng)).collect())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    #[test]
    fn lab_values() {
        let t = ThermalMotion::from_lab(TAU / 0.780, -TAU / 0.480, 10e-6).unwrap();
        assert_relative_eq!(t.spin_wavelength, 1.26, max_relative = 1e-12);
        assert_relative_eq!(t.velocity_scale, 0.043_73, max_relative = 1e-3);
        assert_relative_eq!(t.velocity_scale / t.spin_wavelength, 0.035, max_relative = 0.02);
    }

    #[test]
    fn rms_is_wavelength_free_at_fixed_ratio() {
        let t = ThermalMotion {
            spin_wavelength: 1.26,
            velocity_scale: 0.035 * 1.26,
        };
        assert_relative_eq!(t.rms_detuning(), 2.0 * TAU * 0.035 / 2f64.sqrt(), max_relative = 1e-12);
    }

    #[test]
    fn zero_temperature_gives_no_detuning() {
        let t = ThermalMotion::from_lab(TAU / 0.780, -TAU / 0.480, 0.0).unwrap();
        assert!(t.sample_detunings(5, 1).unwrap().iter().all(|&d| d == 0.0));
    }
}

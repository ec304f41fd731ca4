//! Physical parameters of the superatom and the mapping from laboratory
//! settings to the rates of the effective model.
//!
//! Units throughout: times in µs, rates in 1/µs, angular frequencies in
//! rad/µs, photon rates in photons/µs, wavenumbers in rad/µm.

use std::f64::consts::TAU;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Convert a cyclic frequency in MHz to an angular frequency in rad/µs.
pub fn mhz_to_angular(f_mhz: f64) -> f64 {
    TAU * f_mhz
}

/// How frequencies are given in a configuration block.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FrequencyUnits {
    /// Values are angular frequencies in rad/µs and are used as-is.
    #[default]
    RadPerUs,
    /// Values are cyclic frequencies in MHz and are multiplied by 2π.
    MhzCyclic,
}

impl FrequencyUnits {
    pub fn to_angular(self, value: f64) -> f64 {
        match self {
            FrequencyUnits::RadPerUs => value,
            FrequencyUnits::MhzCyclic => mhz_to_angular(value),
        }
    }
}

/// Laboratory settings.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentParams {
    /// Intermediate-state detuning Δ (rad/µs).
    pub delta: f64,
    /// Control Rabi frequency Ω_c (rad/µs).
    pub omega_c: f64,
    /// Natural linewidth of the intermediate state (rad/µs).
    pub gamma_e: f64,
    /// Single-atom single-photon coupling (rad/µs per √photon).
    #[serde(default)]
    pub g0: f64,
    #[serde(default = "one")]
    pub n_atoms: f64,
    /// Probe photon rate on the flat top of the pulse (photons/µs).
    #[serde(default)]
    pub r_p: f64,
    /// Probe wavenumber (rad/µm).
    #[serde(default = "default_k_p")]
    pub k_p: f64,
    /// Control wavenumber (rad/µm); negative for a counter-propagating beam.
    #[serde(default = "default_k_c")]
    pub k_c: f64,
    /// Ensemble temperature (µK).
    #[serde(default)]
    pub temperature: f64,
}

fn one() -> f64 {
    1.0
}

fn default_k_p() -> f64 {
    TAU / 0.780
}

fn default_k_c() -> f64 {
    -TAU / 0.480
}

impl ExperimentParams {
    /// Settings of the measured datasets: Ω_c = 2π·13 MHz, Γ_e = 2π·6 MHz,
    /// the given Δ (MHz) and probe rate.
    pub fn lab(delta_mhz: f64, r_p: f64) -> Self {
        ExperimentParams {
            delta: mhz_to_angular(delta_mhz),
            omega_c: mhz_to_angular(13.0),
            gamma_e: mhz_to_angular(6.0),
            g0: 0.0,
            n_atoms: 1.0,
            r_p,
            k_p: default_k_p(),
            k_c: default_k_c(),
            temperature: 10.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let finite = [
            self.delta,
            self.omega_c,
            self.gamma_e,
            self.g0,
            self.n_atoms,
            self.r_p,
            self.k_p,
            self.k_c,
            self.temperature,
        ]
        .iter()
        .all(|v| v.is_finite());
        if !finite {
            return Err(Error::invalid("experiment parameters must be finite"));
        }
        if self.delta == 0.0 {
            return Err(Error::invalid("delta must be non-zero"));
        }
        if self.delta < 0.0 {
            return Err(Error::invalid("delta must be positive"));
        }
        if self.omega_c <= 0.0 {
            return Err(Error::invalid("omega_c must be positive"));
        }
        if self.gamma_e <= 0.0 {
            return Err(Error::invalid("gamma_e must be positive"));
        }
        if self.n_atoms < 1.0 {
            return Err(Error::invalid("n_atoms must be at least 1"));
        }
        if self.r_p < 0.0 {
            return Err(Error::invalid("r_p must be non-negative"));
        }
        if self.temperature < 0.0 {
            return Err(Error::invalid("temperature must be non-negative"));
        }
        Ok(())
    }

    /// Raman decay Γ = Γ_e (Ω_c / 2Δ)².
    pub fn raman_rate(&self) -> f64 {
        let ratio = self.omega_c / (2.0 * self.delta);
        self.gamma_e * ratio * ratio
    }

    /// Collective single-photon coupling κ = N g₀² Ω_c² / (16 Δ²).
    pub fn collective_coupling(&self) -> f64 {
        self.n_atoms * self.g0 * self.g0 * self.omega_c * self.omega_c
            / (16.0 * self.delta * self.delta)
    }

    /// Single-atom effective Rabi frequency √R_p g₀ Ω_c / (2Δ).
    pub fn single_atom_rabi(&self) -> f64 {
        self.r_p.sqrt() * self.g0 * self.omega_c / (2.0 * self.delta)
    }
}

/// Rates of the effective four-level model.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EffectiveParams {
    /// Collective coupling κ of the bright state to the probe mode (1/µs).
    pub kappa: f64,
    /// Coherent bright/subradiant exchange ϰ (rad/µs).
    #[serde(default)]
    pub varkappa: f64,
    /// Raman decay Γ of every excited state (1/µs).
    #[serde(default)]
    pub gamma_raman: f64,
    /// Dephasing into the dark reservoir γ_D (1/µs).
    #[serde(default)]
    pub gamma_d: f64,
    /// Probe photon rate on the pulse flat top (photons/µs).
    #[serde(default)]
    pub r_p: f64,
}

impl EffectiveParams {
    pub fn new(kappa: f64, gamma_raman: f64, gamma_d: f64, varkappa: f64, r_p: f64) -> Self {
        EffectiveParams {
            kappa,
            varkappa,
            gamma_raman,
            gamma_d,
            r_p,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let all = [self.kappa, self.varkappa, self.gamma_raman, self.gamma_d, self.r_p];
        if all.iter().any(|v| !v.is_finite()) {
            return Err(Error::invalid("effective parameters must be finite"));
        }
        if self.kappa < 0.0 {
            return Err(Error::invalid(format!("kappa = {} is negative", self.kappa)));
        }
        if self.gamma_raman < 0.0 {
            return Err(Error::invalid(format!(
                "gamma_raman = {} is negative",
                self.gamma_raman
            )));
        }
        if self.gamma_d < 0.0 {
            return Err(Error::invalid(format!("gamma_d = {} is negative", self.gamma_d)));
        }
        if self.r_p < 0.0 {
            return Err(Error::invalid(format!("r_p = {} is negative", self.r_p)));
        }
        Ok(())
    }

    pub fn with_varkappa(mut self, varkappa: f64) -> Self {
        self.varkappa = varkappa;
        self
    }

    pub fn with_gamma_d(mut self, gamma_d: f64) -> Self {
        self.gamma_d = gamma_d;
        self
    }

    pub fn with_r_p(mut self, r_p: f64) -> Self {
        self.r_p = r_p;
        self
    }

    /// Total decay rate of the bright state, κ + Γ + γ_D. This is the
    /// post-pulse emission rate when ϰ = 0.
    pub fn bright_decay_rate(&self) -> f64 {
        self.kappa + self.gamma_raman + self.gamma_d
    }
}

/// Map laboratory settings onto the derivable model rates.
///
/// Only κ and Γ follow from the settings; ϰ and γ_D are fit parameters and
/// are returned as zero.
pub fn derive_effective(params: &ExperimentParams) -> Result<EffectiveParams> {
    params.validate()?;
    Ok(EffectiveParams {
        kappa: params.collective_coupling(),
        varkappa: 0.0,
        gamma_raman: params.raman_rate(),
        gamma_d: 0.0,
        r_p: params.r_p,
    })
}

/// Collective Rabi frequency Ω_col = 2√(κ R_p).
pub fn collective_rabi(eff: &EffectiveParams) -> f64 {
    2.0 * (eff.kappa.max(0.0) * eff.r_p.max(0.0)).sqrt()
}

/// Rescale a coupling known at detuning `delta_ref` to detuning `delta`
/// using κ ∝ 1/Δ².
pub fn scale_kappa(kappa_ref: f64, delta_ref: f64, delta: f64) -> f64 {
    kappa_ref * (delta_ref / delta).powi(2)
}

/// One calibrated parameter set of the effective model, together with the
/// laboratory settings it belongs to.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CalibratedSet {
    pub r_p: f64,
    pub delta_mhz: f64,
    pub kappa: f64,
    pub gamma_raman: f64,
    pub gamma_d: f64,
    pub varkappa: f64,
}

impl CalibratedSet {
    pub fn effective(&self) -> EffectiveParams {
        EffectiveParams::new(self.kappa, self.gamma_raman, self.gamma_d, self.varkappa, self.r_p)
    }

    pub fn experiment(&self) -> ExperimentParams {
        ExperimentParams::lab(self.delta_mhz, self.r_p)
    }

    /// Γ from the Raman formula rather than the tabulated value.
    pub fn formula_raman_rate(&self) -> f64 {
        self.experiment().raman_rate()
    }
}

/// Parameter sets fitted to the four measured datasets
/// (R_p, Δ/2π, κ, Γ, γ_D, ϰ). Γ is the tabulated value; see
/// [`CalibratedSet::formula_raman_rate`] for the value from the formula.
pub const CALIBRATED_SETS: [CalibratedSet; 4] = [
    CalibratedSet {
        r_p: 15.0,
        delta_mhz: 100.0,
        kappa: 0.46,
        gamma_raman: 0.15,
        gamma_d: 0.85,
        varkappa: 0.31,
    },
    CalibratedSet {
        r_p: 15.0,
        delta_mhz: 125.0,
        kappa: 0.32,
        gamma_raman: 0.10,
        gamma_d: 0.85,
        varkappa: 0.32,
    },
    CalibratedSet {
        r_p: 15.0,
        delta_mhz: 150.0,
        kappa: 0.21,
        gamma_raman: 0.064,
        gamma_d: 0.85,
        varkappa: 0.31,
    },
    CalibratedSet {
        r_p: 6.7,
        delta_mhz: 100.0,
        kappa: 0.47,
        gamma_raman: 0.15,
        gamma_d: 0.85,
        varkappa: 0.34,
    },
];

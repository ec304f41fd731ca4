//! JSON run configuration. Unknown keys are rejected everywhere.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use superatom::analysis::{linspace, SweepOptions};
use superatom::calibration::{Bounds, CalibrationOptions, FixedValues, FreeParams};
use superatom::params::CALIBRATED_SETS;
use superatom::trace::TraceSimulator;
use superatom::superatom::FourLevelModel;
use superatom::waveguide::{
    apply_thermal_detunings, Backend, ThermalMotion, TrajectoryOptions, WaveguideConfig, WaveguideModel,
};
use superatom::{EffectiveParams, ExperimentParams};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub output_dir: Option<PathBuf>,
    #[serde(default)]
    pub model: Option<ModelConfig>,
    #[serde(default)]
    pub simulate: Option<SimulateConfig>,
    #[serde(default)]
    pub sweep: Option<SweepConfig>,
    #[serde(default)]
    pub calibrate: Option<CalibrateConfig>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum ModelConfig {
    FourLevel {
        /// Row of the calibrated-set table (1-based).
        #[serde(default)]
        table_row: Option<usize>,
        #[serde(default)]
        params: Option<EffectiveParams>,
        /// Drop the coherent exchange (ϰ = 0).
        #[serde(default)]
        incoherent: bool,
    },
    Waveguide {
        n_atoms: usize,
        kappa: f64,
        gamma_raman: f64,
        #[serde(default)]
        gamma_d: f64,
        #[serde(default)]
        placement: Placement,
        /// Ensemble temperature in µK; 0 disables thermal detunings.
        #[serde(default)]
        temperature_uk: f64,
        #[serde(default = "auto")]
        backend: Backend,
        #[serde(default)]
        trajectories: TrajectoryOptions,
    },
}

fn auto() -> Backend {
    Backend::Auto
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Placement {
    #[default]
    Ordered,
    Random,
}

impl ModelConfig {
    /// Rates of a four-level model, if this is one.
    pub fn effective(&self) -> Result<Option<EffectiveParams>, String> {
        let ModelConfig::FourLevel {
            table_row,
            params,
            incoherent,
        } = self
        else {
            return Ok(None);
        };
        let mut eff = match (table_row, params) {
            (Some(row), None) => CALIBRATED_SETS
                .get(row.wrapping_sub(1))
                .ok_or_else(|| format!("table_row must be 1..={}, got {row}", CALIBRATED_SETS.len()))?
                .effective(),
            (None, Some(p)) => *p,
            _ => return Err("four_level model needs exactly one of table_row or params".into()),
        };
        if *incoherent {
            eff.varkappa = 0.0;
        }
        eff.validate().map_err(|e| e.to_string())?;
        Ok(Some(eff))
    }

    /// Probe rate of the calibrated row, used when no peak rate is given.
    pub fn default_peak_rate(&self) -> Option<f64> {
        match self {
            ModelConfig::FourLevel {
                table_row: Some(row), ..
            } => CALIBRATED_SETS.get(row.wrapping_sub(1)).map(|s| s.r_p),
            _ => None,
        }
    }

    pub fn build(&self, seed: u64) -> Result<Box<dyn TraceSimulator>, String> {
        if let Some(eff) = self.effective()? {
            return Ok(Box::new(FourLevelModel::new(eff)));
        }
        let ModelConfig::Waveguide {
            n_atoms,
            kappa,
            gamma_raman,
            gamma_d,
            placement,
            temperature_uk,
            backend,
            trajectories,
        } = self
        else {
            unreachable!("four-level handled above");
        };
        let err = |e: superatom::Error| e.to_string();
        let mut cfg = match placement {
            Placement::Ordered => WaveguideConfig::ordered(*n_atoms, *kappa, *gamma_raman),
            Placement::Random => WaveguideConfig::random(*n_atoms, *kappa, *gamma_raman, seed),
        }
        .map_err(err)?
        .with_gamma_d(*gamma_d);
        if *temperature_uk > 0.0 {
            let lab = ExperimentParams::lab(100.0, 0.0);
            cfg.thermal = Some(ThermalMotion::from_lab(lab.k_p, lab.k_c, *temperature_uk).map_err(err)?);
            cfg = apply_thermal_detunings(&cfg, seed).map_err(err)?;
        } else if *temperature_uk < 0.0 {
            return Err("temperature_uk must be non-negative".into());
        }
        cfg.validate().map_err(err)?;
        let trajectories = TrajectoryOptions {
            seed: seed.wrapping_add(trajectories.seed),
            ..*trajectories
        };
        Ok(Box::new(
            WaveguideModel::new(cfg).with_backend(*backend).with_trajectories(trajectories),
        ))
    }
}

/// Noise applied to simulated traces; the seed comes from the run seed.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NoiseConfig {
    pub n_measurements: u64,
    pub efficiency: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SimulateConfig {
    pub pulse_lengths: Lengths,
    #[serde(default)]
    pub timing: Option<SweepOptions>,
    #[serde(default)]
    pub noise: Option<NoiseConfig>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SweepConfig {
    pub pulse_lengths: Lengths,
    #[serde(default)]
    pub options: Option<SweepOptions>,
    #[serde(default)]
    pub noise: Option<NoiseConfig>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum Lengths {
    List(Vec<f64>),
    Range { start: f64, stop: f64, count: usize },
}

impl Lengths {
    pub fn values(&self) -> Result<Vec<f64>, String> {
        let v = match self {
            Lengths::List(v) => v.clone(),
            Lengths::Range { start, stop, count } => linspace(*start, *stop, *count),
        };
        if v.is_empty() {
            return Err("pulse_lengths is empty".into());
        }
        if v.iter().any(|l| !(l.is_finite() && *l > 0.0)) {
            return Err("pulse lengths must be positive".into());
        }
        Ok(v)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetConfig {
    pub name: String,
    pub delta_mhz: f64,
    /// Defaults to Γ_e (Ω_c/2Δ)² at the laboratory settings.
    #[serde(default)]
    pub gamma_raman: Option<f64>,
    pub traces: Vec<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CalibrateConfig {
    pub datasets: Vec<DatasetConfig>,
    #[serde(default)]
    pub free: FreeParams,
    #[serde(default)]
    pub bounds: Bounds,
    #[serde(default)]
    pub fixed: FixedValues,
    #[serde(default = "yes")]
    pub shared_gamma_d: bool,
    #[serde(default)]
    pub kappa_law: bool,
    #[serde(default)]
    pub options: CalibrationOptions,
    /// Regress fitted ϰ against fitted κ across datasets.
    #[serde(default)]
    pub kappa_scaling: bool,
}

fn yes() -> bool {
    true
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self, String> {
        let text = std::fs::read_to_string(path).map_err(|e| format!("{}: {e}", path.display()))?;
        let mut cfg: RunConfig =
            serde_json::from_str(&text).map_err(|e| format!("{}: {e}", path.display()))?;
        if let Some(c) = cfg.calibrate.as_mut() {
            let base = path.parent().unwrap_or(Path::new("."));
            for d in &mut c.datasets {
                for t in &mut d.traces {
                    if t.is_relative() {
                        *t = base.join(&*t);
                    }
                }
            }
        }
        Ok(cfg)
    }

    /// Hex SHA-256 of the canonical JSON form, output location excluded.
    pub fn hash(&self) -> String {
        let canonical = RunConfig {
            output_dir: None,
            ..self.clone()
        };
        let json = serde_json::to_string(&canonical).expect("config serializes");
        format!("{:x}", Sha256::digest(json.as_bytes()))
    }

    fn model(&self) -> Result<&ModelConfig, String> {
        self.model.as_ref().ok_or_else(|| "config has no model block".to_string())
    }

    pub fn validate_simulate(&self) -> Result<(), String> {
        let s = self.simulate.as_ref().ok_or("config has no simulate block")?;
        self.model()?.build(self.seed)?;
        let lengths = s.pulse_lengths.values()?;
        let opts = self.simulate_timing()?;
        for l in lengths {
            opts.pulse(l).map_err(|e| e.to_string())?;
            opts.bin_edges(l).map_err(|e| e.to_string())?;
        }
        validate_noise(s.noise.as_ref())
    }

    pub fn validate_sweep(&self) -> Result<(), String> {
        let s = self.sweep.as_ref().ok_or("config has no sweep block")?;
        self.model()?.build(self.seed)?;
        let lengths = s.pulse_lengths.values()?;
        if lengths.windows(2).any(|w| !(w[1] > w[0])) {
            return Err("sweep pulse lengths must be strictly increasing".into());
        }
        let opts = self.sweep_options()?;
        for l in lengths {
            opts.pulse(l).map_err(|e| e.to_string())?;
        }
        validate_noise(s.noise.as_ref())
    }

    pub fn validate_calibrate(&self) -> Result<(), String> {
        let c = self.calibrate.as_ref().ok_or("config has no calibrate block")?;
        if c.datasets.is_empty() {
            return Err("calibrate.datasets is empty".into());
        }
        for d in &c.datasets {
            if d.traces.is_empty() {
                return Err(format!("dataset {:?} lists no traces", d.name));
            }
            if !(d.delta_mhz > 0.0) {
                return Err(format!("dataset {:?}: delta_mhz must be positive", d.name));
            }
        }
        if c.kappa_scaling && c.datasets.len() < 3 {
            return Err("kappa_scaling needs at least three datasets".into());
        }
        Ok(())
    }

    fn timing_with_rate(&self, opts: Option<SweepOptions>) -> Result<SweepOptions, String> {
        let mut o = opts.unwrap_or_default();
        let explicit = opts.is_some_and(|o| o.peak_rate != SweepOptions::default().peak_rate);
        if !explicit {
            if let Some(r) = self.model()?.default_peak_rate() {
                o.peak_rate = r;
            }
        }
        o.noise = None;
        Ok(o)
    }

    pub fn simulate_timing(&self) -> Result<SweepOptions, String> {
        let s = self.simulate.as_ref().ok_or("config has no simulate block")?;
        self.timing_with_rate(s.timing)
    }

    pub fn sweep_options(&self) -> Result<SweepOptions, String> {
        let s = self.sweep.as_ref().ok_or("config has no sweep block")?;
        let mut o = self.timing_with_rate(s.options)?;
        o.noise = s.noise.map(|n| superatom::analysis::NoiseOptions {
            n_measurements: n.n_measurements,
            efficiency: n.efficiency,
            seed: self.seed,
        });
        Ok(o)
    }
}

fn validate_noise(noise: Option<&NoiseConfig>) -> Result<(), String> {
    match noise {
        Some(n) if n.n_measurements == 0 || !(n.efficiency > 0.0 && n.efficiency <= 1.0) => {
            Err("noise needs n_measurements > 0 and efficiency in (0, 1]".into())
        }
        _ => Ok(()),
    }
}

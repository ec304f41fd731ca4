use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use serde::Serialize;
use serde_json::json;
use superatom::analysis::{dominant_period, phase_correlation, sweep_pulse_lengths, SweepResult};
use superatom::calibration::{joint_fit, kappa_scaling, CalibrationProblem, CalibrationReport, Dataset};
use superatom::trace::{poissonize, write_trace, TraceMetadata};
use superatom::ExperimentParams;

use crate::config::RunConfig;
use crate::{CliError, Format};

/// Enough to regenerate any output file: the run config hashes to
/// `config_hash` and was executed with `seed`.
#[derive(Debug, Clone, Serialize)]
pub struct RunMetadata {
    pub version: &'static str,
    pub command: &'static str,
    pub config_hash: String,
    pub seed: u64,
}

impl RunMetadata {
    fn new(command: &'static str, cfg: &RunConfig) -> Self {
        RunMetadata {
            version: env!("CARGO_PKG_VERSION"),
            command,
            config_hash: cfg.hash(),
            seed: cfg.seed,
        }
    }
}

pub struct Output {
    pub stdout: String,
}

fn out_dir(cfg: &RunConfig) -> Option<&Path> {
    cfg.output_dir.as_deref()
}

fn write(path: &Path, contents: &str) -> Result<(), CliError> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).map_err(|e| CliError::io(dir, e))?;
    }
    fs::write(path, contents).map_err(|e| CliError::io(path, e))
}

fn pretty<T: Serialize>(value: &T) -> String {
    let mut s = serde_json::to_string_pretty(value).expect("output serializes");
    s.push('\n');
    s
}

pub fn simulate(cfg: &RunConfig, format: Format) -> Result<Output, CliError> {
    cfg.validate_simulate().map_err(CliError::Usage)?;
    let dir = out_dir(cfg).ok_or_else(|| CliError::Usage("simulate needs --out or output_dir".into()))?;
    let block = cfg.simulate.as_ref().expect("validated");
    let model_cfg = cfg.model.as_ref().expect("validated");
    let model = model_cfg.build(cfg.seed).map_err(CliError::Usage)?;
    let timing = cfg.simulate_timing().map_err(CliError::Usage)?;
    let meta = RunMetadata::new("simulate", cfg);
    let effective = model_cfg.effective().map_err(CliError::Usage)?;

    let mut written = Vec::new();
    for (k, len) in block.pulse_lengths.values().map_err(CliError::Usage)?.into_iter().enumerate() {
        let pulse = timing.pulse(len)?;
        let edges = timing.bin_edges(len)?;
        let mut trace = model.simulate(&pulse, &edges)?;
        if let Some(n) = block.noise {
            trace = poissonize(&trace, n.n_measurements, n.efficiency, cfg.seed.wrapping_add(k as u64))?;
        }
        let mut tm = TraceMetadata::for_trace(&trace, "superatom simulate");
        tm.pulse = Some(pulse);
        tm.effective = effective;
        tm.model = Some(serde_json::to_value(model_cfg).expect("model serializes"));
        tm.seed = Some(meta.seed);
        tm.config_hash = Some(meta.config_hash.clone());
        let path = dir.join(format!("trace_{k:02}.csv"));
        fs::create_dir_all(dir).map_err(|e| CliError::io(dir, e))?;
        write_trace(&path, &trace, &tm)?;
        written.push(json!({
            "path": path,
            "pulse_length": len,
            "emitted": trace.rates().iter().enumerate().map(|(i, r)| r * trace.bin_width(i)).sum::<f64>(),
        }));
    }
    let stdout = match format {
        Format::Json => pretty(&json!({ "metadata": meta, "traces": written })),
        Format::Csv => {
            let mut s = String::from("path,pulse_length_us\n");
            for w in &written {
                let _ = writeln!(s, "{},{}", w["path"].as_str().unwrap_or_default(), w["pulse_length"]);
            }
            s
        }
    };
    Ok(Output { stdout })
}

#[derive(Debug, Clone, Serialize)]
pub struct Period {
    pub period: f64,
    pub explained: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct SweepSummary {
    pub n_lengths: usize,
    pub n_failed: usize,
    /// 2π/Ω_col on the pulse flat top.
    pub rabi_period: Option<f64>,
    pub gamma_period: Option<Period>,
    pub i0_period: Option<Period>,
    /// Correlation of the detrended γ and I₀ series.
    pub phase_correlation: Option<f64>,
    pub gamma_min: Option<f64>,
    pub gamma_max: Option<f64>,
}

pub fn summarize(sweep: &SweepResult) -> SweepSummary {
    let period = |(x, y): (Vec<f64>, Vec<f64>)| {
        dominant_period(&x, &y, None).ok().map(|p| Period {
            period: p.period,
            explained: p.explained,
        })
    };
    let (_, gamma) = sweep.gamma_series();
    SweepSummary {
        n_lengths: sweep.pulse_lengths.len(),
        n_failed: sweep.n_failed(),
        rabi_period: sweep.rabi_period,
        gamma_period: period(sweep.gamma_series()),
        i0_period: period(sweep.i0_series()),
        phase_correlation: phase_correlation(sweep).ok(),
        gamma_min: gamma.iter().cloned().reduce(f64::min),
        gamma_max: gamma.iter().cloned().reduce(f64::max),
    }
}

pub fn sweep(cfg: &RunConfig, format: Format) -> Result<Output, CliError> {
    cfg.validate_sweep().map_err(CliError::Usage)?;
    let block = cfg.sweep.as_ref().expect("validated");
    let model = cfg.model.as_ref().expect("validated").build(cfg.seed).map_err(CliError::Usage)?;
    let opts = cfg.sweep_options().map_err(CliError::Usage)?;
    let lengths = block.pulse_lengths.values().map_err(CliError::Usage)?;
    let result = sweep_pulse_lengths(model.as_ref(), &lengths, &opts)?;

    let meta = RunMetadata::new("sweep", cfg);
    let csv = result.to_csv();
    let doc = pretty(&json!({
        "metadata": meta,
        "summary": summarize(&result),
        "sweep": result,
    }));
    if let Some(dir) = out_dir(cfg) {
        write(&dir.join("sweep.csv"), &csv)?;
        write(&dir.join("sweep.json"), &doc)?;
    }
    Ok(Output {
        stdout: match format {
            Format::Csv => csv,
            Format::Json => doc,
        },
    })
}

fn load_datasets(cfg: &RunConfig) -> Result<Vec<Dataset>, CliError> {
    let block = cfg.calibrate.as_ref().expect("validated");
    block
        .datasets
        .iter()
        .map(|d| {
            let gamma = d
                .gamma_raman
                .unwrap_or_else(|| ExperimentParams::lab(d.delta_mhz, 0.0).raman_rate());
            Dataset::from_files(&d.name, d.delta_mhz, gamma, &d.traces).map_err(CliError::from)
        })
        .collect()
}

/// Weighted ϰ-against-κ regression over the per-dataset estimates.
fn scaling_section(report: &mut CalibrationReport) -> Result<(), CliError> {
    let points: Vec<(f64, f64)> = report.datasets.iter().map(|d| (d.kappa, d.varkappa)).collect();
    let weights: Option<Vec<f64>> = report
        .datasets
        .iter()
        .map(|d| {
            let se = report.parameter(&format!("varkappa[{}]", d.name))?.std_err;
            (se.is_finite() && se > 0.0).then(|| 1.0 / (se * se))
        })
        .collect();
    report.kappa_scaling = Some(kappa_scaling(&points, weights.as_deref())?);
    Ok(())
}

fn calibration_csv(report: &CalibrationReport) -> String {
    let mut s = String::from(
        "name,r_p,delta_mhz,kappa,gamma_raman,gamma_d,varkappa,reduced_chi2,fit_window_residual\n",
    );
    for d in &report.datasets {
        let _ = writeln!(
            s,
            "{},{},{},{},{},{},{},{},{}",
            d.name, d.r_p, d.delta_mhz, d.kappa, d.gamma_raman, d.gamma_d, d.varkappa, d.reduced_chi2, d.fit_window_residual
        );
    }
    s
}

pub fn calibrate(cfg: &RunConfig, format: Format) -> Result<Output, CliError> {
    cfg.validate_calibrate().map_err(CliError::Usage)?;
    let block = cfg.calibrate.as_ref().expect("validated");
    let problem = CalibrationProblem {
        datasets: load_datasets(cfg)?,
        free: block.free,
        bounds: block.bounds,
        fixed: block.fixed,
        shared_gamma_d: block.shared_gamma_d,
        kappa_law: block.kappa_law,
        options: block.options,
    };
    let mut report = joint_fit(&problem)?;
    if block.kappa_scaling {
        scaling_section(&mut report)?;
    }
    let meta = RunMetadata::new("calibrate", cfg);
    let csv = calibration_csv(&report);
    let doc = pretty(&json!({ "metadata": meta, "report": report }));
    if let Some(dir) = out_dir(cfg) {
        write(&dir.join("calibration.csv"), &csv)?;
        write(&dir.join("calibration.json"), &doc)?;
    }
    Ok(Output {
        stdout: match format {
            Format::Csv => csv,
            Format::Json => doc,
        },
    })
}

/// Check every block present in the config without running anything.
pub fn validate_config(cfg: &RunConfig) -> Result<Output, CliError> {
    let mut checked = Vec::new();
    if cfg.simulate.is_some() {
        cfg.validate_simulate().map_err(CliError::Usage)?;
        checked.push("simulate");
    }
    if cfg.sweep.is_some() {
        cfg.validate_sweep().map_err(CliError::Usage)?;
        checked.push("sweep");
    }
    if cfg.calibrate.is_some() {
        cfg.validate_calibrate().map_err(CliError::Usage)?;
        let missing: Vec<&PathBuf> = cfg
            .calibrate
            .iter()
            .flat_map(|c| &c.datasets)
            .flat_map(|d| &d.traces)
            .filter(|p| !p.exists())
            .collect();
        if let Some(p) = missing.first() {
            return Err(CliError::Usage(format!("{}: trace file not found", p.display())));
        }
        checked.push("calibrate");
    }
    if checked.is_empty() {
        return Err(CliError::Usage("config has no simulate, sweep or calibrate block".into()));
    }
    Ok(Output {
        stdout: pretty(&json!({ "valid": true, "blocks": checked, "config_hash": cfg.hash() })),
    })
}

//! Time-binned photon traces: rates or counts, Poisson sampling, and the
//! CSV + JSON sidecar exchange format.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Poisson};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::params::{EffectiveParams, ExperimentParams};
use crate::pulse::PulseShape;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TraceValues {
    /// Photons/µs per bin.
    Rates(Vec<f64>),
    /// Detected photons per bin, summed over all measurements.
    Counts(Vec<u64>),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PhotonTrace {
    pub bin_edges: Vec<f64>,
    pub values: TraceValues,
    pub n_measurements: u64,
    pub detection_efficiency: f64,
}

impl PhotonTrace {
    pub fn from_rates(bin_edges: Vec<f64>, rates: Vec<f64>) -> Result<Self> {
        let t = PhotonTrace {
            bin_edges,
            values: TraceValues::Rates(rates),
            n_measurements: 1,
            detection_efficiency: 1.0,
        };
        t.validate()?;
        Ok(t)
    }

    pub fn from_counts(
        bin_edges: Vec<f64>,
        counts: Vec<u64>,
        n_measurements: u64,
        detection_efficiency: f64,
    ) -> Result<Self> {
        let t = PhotonTrace {
            bin_edges,
            values: TraceValues::Counts(counts),
            n_measurements,
            detection_efficiency,
        };
        t.validate()?;
        Ok(t)
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.len();
        if self.bin_edges.len() != n + 1 {
            return Err(Error::DimensionMismatch {
                expected: n + 1,
                found: self.bin_edges.len(),
            });
        }
        if self.bin_edges.windows(2).any(|w| !(w[1] > w[0])) {
            return Err(Error::InvalidGrid("bin edges must be strictly increasing".into()));
        }
        if let TraceValues::Rates(r) = &self.values {
            if r.iter().any(|x| !(*x >= 0.0) || !x.is_finite()) {
                return Err(Error::invalid("trace rates must be finite and non-negative"));
            }
        }
        if !(self.detection_efficiency > 0.0 && self.detection_efficiency <= 1.0) {
            return Err(Error::invalid("detection efficiency must lie in (0, 1]"));
        }
        if self.n_measurements == 0 {
            return Err(Error::invalid("n_measurements must be positive"));
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        match &self.values {
            TraceValues::Rates(r) => r.len(),
            TraceValues::Counts(c) => c.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn is_counts(&self) -> bool {
        matches!(self.values, TraceValues::Counts(_))
    }

    pub fn counts(&self) -> Option<&[u64]> {
        match &self.values {
            TraceValues::Counts(c) => Some(c),
            TraceValues::Rates(_) => None,
        }
    }

    pub fn bin_width(&self, i: usize) -> f64 {
        self.bin_edges[i + 1] - self.bin_edges[i]
    }

    pub fn bin_centers(&self) -> Vec<f64> {
        self.bin_edges.windows(2).map(|w| 0.5 * (w[0] + w[1])).collect()
    }

    /// Exposure of bin `i` in µs summed over measurements and weighted by
    /// the detection efficiency: counts = rate × exposure.
    pub fn exposure(&self, i: usize) -> f64 {
        self.bin_width(i) * self.n_measurements as f64 * self.detection_efficiency
    }

    /// Photon rate per bin (photons/µs at the emitter), converting counts.
    pub fn rates(&self) -> Vec<f64> {
        match &self.values {
            TraceValues::Rates(r) => r.clone(),
            TraceValues::Counts(c) => c
                .iter()
                .enumerate()
                .map(|(i, &k)| k as f64 / self.exposure(i))
                .collect(),
        }
    }

    /// Shift every bin by `dt`.
    pub fn translated(&self, dt: f64) -> Self {
        let mut t = self.clone();
        t.bin_edges.iter_mut().for_each(|e| *e += dt);
        t
    }

    pub fn peak_rate(&self) -> f64 {
        self.rates().into_iter().fold(0.0, f64::max)
    }
}

/// Uniform bins of width `bin_width` covering `[start, stop]` with one edge
/// exactly at `anchor`.
pub fn aligned_edges(start: f64, stop: f64, bin_width: f64, anchor: f64) -> Result<Vec<f64>> {
    if !(bin_width > 0.0) || !(stop > start) {
        return Err(Error::InvalidGrid(format!(
            "need stop > start and positive bin width (start {start}, stop {stop}, width {bin_width})"
        )));
    }
    let k0 = ((start - anchor) / bin_width + 1e-9).floor() as i64;
    let k1 = ((stop - anchor) / bin_width - 1e-9).ceil() as i64;
    Ok((k0..=k1).map(|k| anchor + k as f64 * bin_width).collect())
}

/// Sample detector counts for `trace`: each bin receives
/// Poisson(rate · bin width · n_measurements · efficiency) photons.
pub fn poissonize(
    trace: &PhotonTrace,
    n_measurements: u64,
    efficiency: f64,
    seed: u64,
) -> Result<PhotonTrace> {
    if !(efficiency > 0.0 && efficiency <= 1.0) {
        return Err(Error::invalid("efficiency must lie in (0, 1]"));
    }
    if n_measurements == 0 {
        return Err(Error::invalid("n_measurements must be positive"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let rates = trace.rates();
    let mut counts = Vec::with_capacity(rates.len());
    for (i, r) in rates.iter().enumerate() {
        let mean = r * trace.bin_width(i) * n_measurements as f64 * efficiency;
        let k = if mean > 0.0 {
            let d = Poisson::new(mean).map_err(|e| Error::invalid(e.to_string()))?;
            d.sample(&mut rng) as u64
        } else {
            0
        };
        counts.push(k);
    }
    PhotonTrace::from_counts(trace.bin_edges.clone(), counts, n_measurements, efficiency)
}

/// Something that turns a probe pulse into a forward-emission trace.
pub trait TraceSimulator: Sync {
    fn simulate(&self, shape: &PulseShape, bin_edges: &[f64]) -> Result<PhotonTrace>;
    /// Collective Rabi frequency on the pulse flat top, if known.
    fn rabi_frequency(&self, peak_rate: f64) -> Option<f64>;
}

/// Sidecar metadata stored next to every exported trace.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TraceMetadata {
    pub version: String,
    pub source: String,
    pub bin_width_us: f64,
    pub n_measurements: u64,
    pub detection_efficiency: f64,
    #[serde(default)]
    pub pulse: Option<PulseShape>,
    #[serde(default)]
    pub effective: Option<EffectiveParams>,
    #[serde(default)]
    pub experiment: Option<ExperimentParams>,
    #[serde(default)]
    pub model: Option<serde_json::Value>,
    #[serde(default)]
    pub seed: Option<u64>,
    #[serde(default)]
    pub config_hash: Option<String>,
}

impl TraceMetadata {
    pub fn for_trace(trace: &PhotonTrace, source: &str) -> Self {
        TraceMetadata {
            version: env!("CARGO_PKG_VERSION").to_string(),
            source: source.to_string(),
            bin_width_us: trace.bin_width(0),
            n_measurements: trace.n_measurements,
            detection_efficiency: trace.detection_efficiency,
            pulse: None,
            effective: None,
            experiment: None,
            model: None,
            seed: None,
            config_hash: None,
        }
    }
}

pub fn sidecar_path(csv_path: &Path) -> PathBuf {
    csv_path.with_extension("json")
}

/// Write `trace` as CSV (`t_bin_center_us,rate` or `t_bin_center_us,counts`)
/// plus a JSON sidecar with the same stem.
pub fn write_trace(csv_path: &Path, trace: &PhotonTrace, meta: &TraceMetadata) -> Result<()> {
    let mut out = String::new();
    let centers = trace.bin_centers();
    match &trace.values {
        TraceValues::Rates(r) => {
            out.push_str("t_bin_center_us,rate\n");
            for (t, v) in centers.iter().zip(r) {
                out.push_str(&format!("{t},{v}\n"));
            }
        }
        TraceValues::Counts(c) => {
            out.push_str("t_bin_center_us,counts\n");
            for (t, v) in centers.iter().zip(c) {
                out.push_str(&format!("{t},{v}\n"));
            }
        }
    }
    let mut f = fs::File::create(csv_path).map_err(|e| Error::File {
        path: csv_path.display().to_string(),
        source: e,
    })?;
    f.write_all(out.as_bytes())?;
    let side = sidecar_path(csv_path);
    let json = serde_json::to_string_pretty(meta)?;
    fs::write(&side, json + "\n").map_err(|e| Error::File {
        path: side.display().to_string(),
        source: e,
    })?;
    Ok(())
}

/// Read a trace written by [`write_trace`] (or any CSV with the same
/// columns and a sidecar). Bins must be uniform.
pub fn read_trace(csv_path: &Path) -> Result<(PhotonTrace, TraceMetadata)> {
    let file = fs::File::open(csv_path).map_err(|e| Error::File {
        path: csv_path.display().to_string(),
        source: e,
    })?;
    let side = sidecar_path(csv_path);
    let meta_text = fs::read_to_string(&side).map_err(|e| Error::File {
        path: side.display().to_string(),
        source: e,
    })?;
    let meta: TraceMetadata = serde_json::from_str(&meta_text)
        .map_err(|e| Error::invalid(format!("{}: {e}", side.display())))?;
    let mut rdr = csv::Reader::from_reader(file);
    let headers = rdr.headers()?.clone();
    let is_counts = match headers.get(1) {
        Some("counts") => true,
        Some("rate") => false,
        other => {
            return Err(Error::invalid(format!(
                "{}: unexpected second column {:?}",
                csv_path.display(),
                other
            )))
        }
    };
    let mut centers = Vec::new();
    let mut vals = Vec::new();
    for rec in rdr.records() {
        let rec = rec?;
        let t: f64 = rec[0]
            .trim()
            .parse()
            .map_err(|_| Error::invalid(format!("bad time value {:?}", &rec[0])))?;
        let v: f64 = rec[1]
            .trim()
            .parse()
            .map_err(|_| Error::invalid(format!("bad value {:?}", &rec[1])))?;
        centers.push(t);
        vals.push(v);
    }
    if centers.is_empty() {
        return Err(Error::InsufficientData { needed: 1, found: 0 });
    }
    let w = meta.bin_width_us;
    let mut edges: Vec<f64> = centers.iter().map(|c| c - 0.5 * w).collect();
    edges.push(centers.last().unwrap() + 0.5 * w);
    let trace = if is_counts {
        let counts = vals.iter().map(|v| v.round().max(0.0) as u64).collect();
        PhotonTrace::from_counts(edges, counts, meta.n_measurements, meta.detection_efficiency)?
    } else {
        let mut t = PhotonTrace::from_rates(edges, vals)?;
        t.n_measurements = meta.n_measurements.max(1);
        t.detection_efficiency = meta.detection_efficiency;
        t
    };
    Ok((trace, meta))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn flat(rate: f64, n: usize, w: f64) -> PhotonTrace {
        let edges: Vec<f64> = (0..=n).map(|i| i as f64 * w).collect();
        PhotonTrace::from_rates(edges, vec![rate; n]).unwrap()
    }

    #[test]
    fn zero_rate_gives_zero_counts() {
        let c = poissonize(&flat(0.0, 50, 0.02), 1_000_000, 0.35, 1).unwrap();
        assert!(c.counts().unwrap().iter().all(|&k| k == 0));
    }

    #[test]
    fn poisson_mean_per_bin() {
        let n = 2000;
        let c = poissonize(&flat(1.0, n, 0.02), 1_000_000, 0.35, 7).unwrap();
        let counts = c.counts().unwrap();
        let mean = counts.iter().sum::<u64>() as f64 / n as f64;
        // mean 7000, σ of the sample mean √(7000/n)
        let sigma = (7000.0 / n as f64).sqrt();
        assert!((mean - 7000.0).abs() < 3.0 * sigma, "mean {mean}");
        let rates = c.rates();
        assert!((rates[0] - 1.0).abs() < 0.1);
    }

    #[test]
    fn same_seed_same_counts() {
        let t = flat(0.3, 100, 0.02);
        let a = poissonize(&t, 100_000, 0.35, 42).unwrap();
        let b = poissonize(&t, 100_000, 0.35, 42).unwrap();
        let c = poissonize(&t, 100_000, 0.35, 43).unwrap();
        assert_eq!(a, b);
        assert_ne!(a, c);
    }

    #[test]
    fn rejects_bad_efficiency() {
        assert!(poissonize(&flat(1.0, 3, 0.1), 10, 0.0, 1).is_err());
        assert!(poissonize(&flat(1.0, 3, 0.1), 10, 1.5, 1).is_err());
    }

    #[test]
    fn aligned_edges_hit_anchor() {
        let e = aligned_edges(-1.01, 0.5, 0.02, 0.0).unwrap();
        assert!(e[0] <= -1.01 && *e.last().unwrap() >= 0.5);
        assert!(e.iter().any(|&x| x.abs() < 1e-12));
    }

    #[test]
    fn csv_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let t = poissonize(&flat(2.0, 20, 0.02), 1000, 0.5, 3).unwrap();
        let path = dir.path().join("trace.csv");
        let mut meta = TraceMetadata::for_trace(&t, "test");
        meta.seed = Some(3);
        write_trace(&path, &t, &meta).unwrap();
        let (back, m2) = read_trace(&path).unwrap();
        assert_eq!(back.counts(), t.counts());
        assert_eq!(m2, meta);
        for (a, b) in back.bin_edges.iter().zip(&t.bin_edges) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn missing_file_reports_path() {
        let err = read_trace(Path::new("/nonexistent/trace.csv")).unwrap_err();
        assert!(err.to_string().contains("/nonexistent/trace.csv"));
    }
}

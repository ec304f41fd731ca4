//! Post-pulse decay analysis: thresholding, log-linear exponential fits,
//! pulse-length sweeps and the rate/amplitude phase relation.

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::pulse::{PulseShape, DEFAULT_TAPER_TIME};
use crate::trace::{aligned_edges, poissonize, PhotonTrace, TraceSimulator};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AnalysisOptions {
    /// Noiseless traces: bins below `relative_floor · peak rate` are masked.
    pub relative_floor: f64,
    /// Count traces: bins with fewer counts are masked.
    pub min_counts: u64,
    /// The fit window opens once the probe rate has dropped below this
    /// fraction of its peak.
    pub switch_off_fraction: f64,
    /// Constant background rate subtracted before fitting (photons/µs).
    pub background: f64,
}

impl Default for AnalysisOptions {
    fn default() -> Self {
        AnalysisOptions {
            relative_floor: 1e-3,
            min_counts: 50,
            switch_off_fraction: 1e-3,
            background: 0.0,
        }
    }
}

/// Bins surviving the threshold.
#[derive(Debug, Clone, PartialEq)]
pub struct Threshold {
    pub included: Vec<bool>,
    /// Rate floor applied to a noiseless trace.
    pub floor_rate: Option<f64>,
    /// Count floor applied to a counts trace.
    pub min_counts: Option<u64>,
}

impl Threshold {
    pub fn n_included(&self) -> usize {
        self.included.iter().filter(|&&b| b).count()
    }
}

/// Mask bins whose signal is too small to fit. Count traces use the
/// absolute count threshold; rate traces use a floor relative to the trace
/// maximum.
pub fn apply_threshold(trace: &PhotonTrace, opts: &AnalysisOptions) -> Result<Threshold> {
    let th = match trace.counts() {
        Some(c) => Threshold {
            included: c.iter().map(|&k| k >= opts.min_counts && k > 0).collect(),
            floor_rate: None,
            min_counts: Some(opts.min_counts),
        },
        None => {
            let rates = trace.rates();
            let floor = opts.relative_floor * rates.iter().cloned().fold(0.0, f64::max);
            Threshold {
                included: rates.iter().map(|&r| r >= floor && r > 0.0).collect(),
                floor_rate: Some(floor),
                min_counts: None,
            }
        }
    };
    if th.n_included() == 0 {
        return Err(Error::InsufficientData {
            needed: 1,
            found: 0,
        });
    }
    Ok(th)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FitWindow {
    pub start: f64,
    pub end: f64,
}

impl FitWindow {
    pub fn new(start: f64, end: f64) -> Self {
        FitWindow { start, end }
    }

    /// From the moment the probe has switched off to the end of the trace.
    pub fn after_pulse(shape: &PulseShape, switch_off_fraction: f64) -> Self {
        FitWindow {
            start: shape.switch_off_time(switch_off_fraction),
            end: f64::INFINITY,
        }
    }
}

/// Result of fitting I₀ e^{−γ (t − t₀)}.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FitResult {
    /// Intensity at the time origin (photons/µs).
    pub i0: f64,
    /// Decay rate (1/µs).
    pub gamma: f64,
    /// Covariance of (I₀, γ).
    pub covariance: [[f64; 2]; 2],
    /// First and last bin edge used.
    pub fit_window: (f64, f64),
    pub n_points_used: usize,
    pub threshold_applied: bool,
    pub time_origin: f64,
}

impl FitResult {
    pub fn i0_err(&self) -> f64 {
        self.covariance[0][0].max(0.0).sqrt()
    }

    pub fn gamma_err(&self) -> f64 {
        self.covariance[1][1].max(0.0).sqrt()
    }
}

/// Weighted least squares of ln(rate) against t over the contiguous run
/// of unmasked bins that starts at the first bin inside `window`.
///
/// Count traces are weighted by their counts (Var ln k ≈ 1/k) and the
/// covariance uses the known variances; rate traces are weighted uniformly
/// and the covariance is scaled by the residual variance.
pub fn fit_exponential(
    trace: &PhotonTrace,
    threshold: Option<&Threshold>,
    window: FitWindow,
    time_origin: f64,
    background: f64,
) -> Result<FitResult> {
    let rates = trace.rates();
    let counts = trace.counts();
    let n = trace.len();
    let first = (0..n).find(|&i| trace.bin_edges[i] >= window.start - 1e-12);
    let Some(first) = first else {
        return Err(Error::InsufficientData { needed: 3, found: 0 });
    };
    let mut used = Vec::new();
    for i in first..n {
        if trace.bin_edges[i + 1] > window.end + 1e-12 {
            break;
        }
        let ok = threshold.map_or(true, |th| th.included[i]);
        let r = rates[i] - background;
        if !ok || !(r > 0.0) {
            break;
        }
        used.push(i);
    }
    if used.len() < 3 {
        return Err(Error::InsufficientData {
            needed: 3,
            found: used.len(),
        });
    }
    let centers = trace.bin_centers();
    let (mut s, mut st, mut stt, mut sy, mut sty) = (0.0, 0.0, 0.0, 0.0, 0.0);
    let pts: Vec<(f64, f64, f64)> = used
        .iter()
        .map(|&i| {
            let t = centers[i] - time_origin;
            let y = (rates[i] - background).ln();
            let w = match counts {
                Some(c) => c[i] as f64,
                None => 1.0,
            };
            (t, y, w)
        })
        .collect();
    for &(t, y, w) in &pts {
        s += w;
        st += w * t;
        stt += w * t * t;
        sy += w * y;
        sty += w * t * y;
    }
    let det = s * stt - st * st;
    if !(det > 0.0) {
        return Err(Error::Degenerate("singular exponential fit".into()));
    }
    let slope = (s * sty - st * sy) / det;
    let intercept = (sy - slope * st) / s;
    let scale = if counts.is_some() {
        1.0
    } else {
        let rss: f64 = pts
            .iter()
            .map(|&(t, y, w)| w * (y - intercept - slope * t).powi(2))
            .sum();
        rss / (pts.len() - 2) as f64
    };
    // covariance of (intercept, slope)
    let c_aa = scale * stt / det;
    let c_bb = scale * s / det;
    let c_ab = -scale * st / det;
    let i0 = intercept.exp();
    let covariance = [[i0 * i0 * c_aa, -i0 * c_ab], [-i0 * c_ab, c_bb]];
    Ok(FitResult {
        i0,
        gamma: -slope,
        covariance,
        fit_window: (trace.bin_edges[used[0]], trace.bin_edges[*used.last().unwrap() + 1]),
        n_points_used: used.len(),
        threshold_applied: threshold.is_some(),
        time_origin,
    })
}

/// Threshold a post-pulse trace and fit its decay, with t = 0 at the
/// pulse end.
pub fn analyze_decay(trace: &PhotonTrace, shape: &PulseShape, opts: &AnalysisOptions) -> Result<FitResult> {
    let th = apply_threshold(trace, opts)?;
    fit_exponential(
        trace,
        Some(&th),
        FitWindow::after_pulse(shape, opts.switch_off_fraction),
        shape.end_time,
        opts.background,
    )
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NoiseOptions {
    pub n_measurements: u64,
    pub efficiency: f64,
    #[serde(default)]
    pub seed: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SweepOptions {
    pub peak_rate: f64,
    pub taper_time: f64,
    /// Common switch-off time of all pulses.
    pub end_time: f64,
    pub bin_width: f64,
    /// Simulated time before the longest pulse starts.
    pub pre_window: f64,
    /// Simulated time after the pulse end.
    pub post_window: f64,
    pub analysis: AnalysisOptions,
    pub noise: Option<NoiseOptions>,
}

impl Default for SweepOptions {
    fn default() -> Self {
        SweepOptions {
            peak_rate: 15.0,
            taper_time: DEFAULT_TAPER_TIME,
            end_time: 0.0,
            bin_width: 0.02,
            pre_window: 0.1,
            post_window: 6.0,
            analysis: AnalysisOptions::default(),
            noise: None,
        }
    }
}

impl SweepOptions {
    pub fn pulse(&self, length: f64) -> Result<PulseShape> {
        PulseShape::with_clamped_taper(length, self.taper_time, self.peak_rate, self.end_time)
    }

    pub fn bin_edges(&self, length: f64) -> Result<Vec<f64>> {
        aligned_edges(
            self.end_time - length - self.pre_window,
            self.end_time + self.post_window,
            self.bin_width,
            self.end_time,
        )
    }
}

/// Evenly spaced pulse lengths, inclusive of both ends.
pub fn linspace(start: f64, stop: f64, count: usize) -> Vec<f64> {
    match count {
        0 => Vec::new(),
        1 => vec![start],
        _ => (0..count)
            .map(|i| start + (stop - start) * i as f64 / (count - 1) as f64)
            .collect(),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepResult {
    pub pulse_lengths: Vec<f64>,
    /// One entry per length; `Err` carries the failure message.
    pub fits: Vec<std::result::Result<FitResult, String>>,
    /// Collective Rabi period on the flat top, when the model knows it.
    pub rabi_period: Option<f64>,
}

impl SweepResult {
    fn series(&self, f: impl Fn(&FitResult) -> f64) -> (Vec<f64>, Vec<f64>) {
        self.pulse_lengths
            .iter()
            .zip(&self.fits)
            .filter_map(|(&l, r)| r.as_ref().ok().map(|fit| (l, f(fit))))
            .unzip()
    }

    /// (pulse length, γ) for every successful fit.
    pub fn gamma_series(&self) -> (Vec<f64>, Vec<f64>) {
        self.series(|f| f.gamma)
    }

    /// (pulse length, I₀) for every successful fit.
    pub fn i0_series(&self) -> (Vec<f64>, Vec<f64>) {
        self.series(|f| f.i0)
    }

    pub fn n_failed(&self) -> usize {
        self.fits.iter().filter(|f| f.is_err()).count()
    }

    /// CSV with columns pulse_length_us, gamma, gamma_err, i0, i0_err;
    /// failed lengths are written as NaN.
    pub fn to_csv(&self) -> String {
        let mut s = String::from("pulse_length_us,gamma,gamma_err,i0,i0_err\n");
        for (l, f) in self.pulse_lengths.iter().zip(&self.fits) {
            match f {
                Ok(f) => s.push_str(&format!(
                    "{l},{},{},{},{}\n",
                    f.gamma,
                    f.gamma_err(),
                    f.i0,
                    f.i0_err()
                )),
                Err(_) => s.push_str(&format!("{l},NaN,NaN,NaN,NaN\n")),
            }
        }
        s
    }
}

/// Simulate and fit every pulse length. Pulses share their end time and
/// differ in start time. Per-length failures are recorded, not fatal.
pub fn sweep_pulse_lengths(
    sim: &dyn TraceSimulator,
    lengths: &[f64],
    opts: &SweepOptions,
) -> Result<SweepResult> {
    if lengths.is_empty() {
        return Err(Error::InsufficientData { needed: 1, found: 0 });
    }
    if lengths.windows(2).any(|w| !(w[1] > w[0])) || lengths[0] <= 0.0 {
        return Err(Error::invalid("pulse lengths must be positive and strictly increasing"));
    }
    let fits: Vec<std::result::Result<FitResult, String>> = lengths
        .par_iter()
        .enumerate()
        .map(|(k, &len)| {
            let run = || -> Result<FitResult> {
                let shape = opts.pulse(len)?;
                let edges = opts.bin_edges(len)?;
                let mut trace = sim.simulate(&shape, &edges)?;
                if let Some(noise) = &opts.noise {
                    trace = poissonize(&trace, noise.n_measurements, noise.efficiency, noise.seed.wrapping_add(k as u64))?;
                }
                analyze_decay(&trace, &shape, &opts.analysis)
            };
            run().map_err(|e| e.to_string())
        })
        .collect();
    let rabi_period = sim
        .rabi_frequency(opts.peak_rate)
        .filter(|w| *w > 0.0)
        .map(|w| std::f64::consts::TAU / w);
    Ok(SweepResult {
        pulse_lengths: lengths.to_vec(),
        fits,
        rabi_period,
    })
}

/// Centered moving average with a window of `width` points, truncated at
/// the ends.
pub fn moving_average(y: &[f64], width: usize) -> Vec<f64> {
    let n = y.len();
    let half = width.max(1) / 2;
    (0..n)
        .map(|i| {
            let lo = i.saturating_sub(half);
            let hi = (i + half).min(n - 1);
            let seg = &y[lo..=hi];
            seg.iter().sum::<f64>() / seg.len() as f64
        })
        .collect()
}

pub fn pearson(x: &[f64], y: &[f64]) -> Result<f64> {
    let n = x.len();
    if n != y.len() || n < 2 {
        return Err(Error::InsufficientData { needed: 2, found: n.min(y.len()) });
    }
    let mx = x.iter().sum::<f64>() / n as f64;
    let my = y.iter().sum::<f64>() / n as f64;
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (a, b) in x.iter().zip(y) {
        sxy += (a - mx) * (b - my);
        sxx += (a - mx).powi(2);
        syy += (b - my).powi(2);
    }
    if sxx == 0.0 || syy == 0.0 {
        return Err(Error::Degenerate("constant series".into()));
    }
    Ok(sxy / (sxx * syy).sqrt())
}

/// Pearson correlation of the detrended γ and I₀ series. Each series has a
/// moving average over one Rabi period subtracted first. A negative value
/// means the decay rate oscillates out of phase with the amplitude.
pub fn phase_correlation(sweep: &SweepResult) -> Result<f64> {
    let (x, gamma) = sweep.gamma_series();
    let (_, i0) = sweep.i0_series();
    if x.len() < 8 {
        return Err(Error::InsufficientData {
            needed: 8,
            found: x.len(),
        });
    }
    let period = match sweep.rabi_period {
        Some(p) => p,
        None => dominant_period(&x, &gamma, None)?.period,
    };
    let mut spacing: Vec<f64> = x.windows(2).map(|w| w[1] - w[0]).collect();
    spacing.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let dx = spacing[spacing.len() / 2];
    let width = ((period / dx).round() as usize).max(1);
    let detrend = |y: &[f64]| -> Vec<f64> {
        let base = moving_average(y, width);
        y.iter().zip(base).map(|(a, b)| a - b).collect()
    };
    let g = detrend(&gamma);
    let a = detrend(&i0);
    let rel = |v: &[f64], raw: &[f64]| {
        let scale = raw.iter().map(|x| x.abs()).fold(0.0, f64::max).max(f64::MIN_POSITIVE);
        let m = v.iter().sum::<f64>() / v.len() as f64;
        (v.iter().map(|x| (x - m).powi(2)).sum::<f64>() / v.len() as f64).sqrt() / scale
    };
    if rel(&g, &gamma) < 1e-9 || rel(&a, &i0) < 1e-9 {
        return Err(Error::Degenerate("detrended series is constant".into()));
    }
    pearson(&g, &a)
}

/// Damped sinusoid found in a series.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PeriodEstimate {
    pub period: f64,
    pub damping: f64,
    pub amplitude: f64,
    /// Fraction of the variance around the quadratic trend explained by
    /// the oscillation.
    pub explained: f64,
}

fn damped_fit_rss(x: &[f64], y: &DVector<f64>, omega: f64, damping: f64) -> (f64, f64) {
    let n = x.len();
    let x0 = x[0];
    let a = DMatrix::from_fn(n, 5, |i, j| {
        let t = x[i] - x0;
        match j {
            0 => 1.0,
            1 => t,
            2 => t * t,
            3 => (-damping * t).exp() * (omega * t).cos(),
            _ => (-damping * t).exp() * (omega * t).sin(),
        }
    });
    let svd = a.clone().svd(true, true);
    match svd.solve(y, 1e-12) {
        Ok(c) => {
            let r = y - &a * &c;
            (r.norm_squared(), (c[3] * c[3] + c[4] * c[4]).sqrt())
        }
        Err(_) => (f64::INFINITY, 0.0),
    }
}

/// Least-squares estimate of the dominant oscillation period of `y(x)`,
/// modelled as quadratic trend + e^{−λx}(A cos ωx + B sin ωx). The period
/// is searched between twice the sample spacing and the series length
/// unless `range` is given.
pub fn dominant_period(x: &[f64], y: &[f64], range: Option<(f64, f64)>) -> Result<PeriodEstimate> {
    let n = x.len();
    if n < 8 || y.len() != n {
        return Err(Error::InsufficientData { needed: 8, found: n });
    }
    let span = x[n - 1] - x[0];
    let dx = span / (n - 1) as f64;
    let (p_min, p_max) = range.unwrap_or((2.0 * dx, span));
    let yv = DVector::from_column_slice(y);
    let trend_rss = {
        let a = DMatrix::from_fn(n, 3, |i, j| (x[i] - x[0]).powi(j as i32));
        let c = a.clone().svd(true, true).solve(&yv, 1e-12).map_err(|e| Error::Degenerate(e.to_string()))?;
        (&yv - &a * c).norm_squared()
    };
    if trend_rss == 0.0 {
        return Err(Error::Degenerate("series has no oscillating component".into()));
    }
    let w_lo = std::f64::consts::TAU / p_max;
    let w_hi = std::f64::consts::TAU / p_min;
    let lambda_max = 3.0 / span.max(1e-12) * 4.0;
    let mut best = (f64::INFINITY, w_lo, 0.0);
    let nw = 400;
    let nl = 16;
    for iw in 0..=nw {
        let w = w_lo + (w_hi - w_lo) * iw as f64 / nw as f64;
        for il in 0..=nl {
            let l = lambda_max * il as f64 / nl as f64;
            let (rss, _) = damped_fit_rss(x, &yv, w, l);
            if rss < best.0 {
                best = (rss, w, l);
            }
        }
    }
    // local refinement
    let (mut dw, mut dl) = ((w_hi - w_lo) / nw as f64, lambda_max / nl as f64);
    for _ in 0..6 {
        let (_, w0, l0) = best;
        for iw in -4..=4 {
            for il in -4..=4 {
                let w = w0 + dw * iw as f64 / 4.0;
                let l = (l0 + dl * il as f64 / 4.0).max(0.0);
                if w <= 0.0 {
                    continue;
                }
                let (rss, _) = damped_fit_rss(x, &yv, w, l);
                if rss < best.0 {
                    best = (rss, w, l);
                }
            }
        }
        dw /= 3.0;
        dl /= 3.0;
    }
    let (rss, w, l) = best;
    let (_, amp) = damped_fit_rss(x, &yv, w, l);
    Ok(PeriodEstimate {
        period: std::f64::consts::TAU / w,
        damping: l,
        amplitude: amp,
        explained: 1.0 - rss / trend_rss,
    })
}

//! Least-squares calibration of the four-level model against photon traces.
//!
//! A fit runs in two stages. Stage 1 sets ϰ = 0 and fits κ (and γ_D when
//! free) to the bins inside the pulses. Stage 2 frees all parameters and
//! runs a seeded multi-start Nelder–Mead search followed by a
//! Levenberg–Marquardt polish with a finite-difference Jacobian. An
//! optional last pass re-fits γ_D on the post-pulse bins alone.
//!
//! [`joint_fit`] combines several datasets with a shared γ_D and optionally
//! κ ∝ 1/Δ², and compares the joint optimum with the independent fits.
//! [`kappa_scaling`] regresses fitted ϰ against κ.

use std::path::Path;

use argmin::core::{CostFunction, Executor, State};
use argmin::solver::neldermead::NelderMead;
use levenberg_marquardt::{LeastSquaresProblem, LevenbergMarquardt};
use nalgebra::{DMatrix, DVector, Dyn, Owned};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use statrs::distribution::{ChiSquared, ContinuousCDF};

use crate::analysis::{apply_threshold, AnalysisOptions, FitWindow, NoiseOptions, SweepOptions};
use crate::error::{Error, Result};
use crate::lindblad::PropagateOptions;
use crate::params::{CalibratedSet, EffectiveParams};
use crate::pulse::PulseShape;
use crate::superatom::simulate_trace;
use crate::trace::{poissonize, read_trace, PhotonTrace, TraceSimulator};

/// One measured (or simulated) trace and the pulse that produced it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceRecord {
    pub pulse: PulseShape,
    pub trace: PhotonTrace,
}

/// Traces over several pulse lengths taken at one setting.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Dataset {
    pub name: String,
    /// Intermediate-state detuning Δ/2π in MHz; only enters through the
    /// κ ∝ 1/Δ² constraint.
    pub delta_mhz: f64,
    /// Raman decay Γ, held fixed during the fit (1/µs).
    pub gamma_raman: f64,
    pub traces: Vec<TraceRecord>,
}

impl Dataset {
    /// Traces from CSV files written by [`crate::trace::write_trace`]. Each
    /// sidecar must carry the pulse.
    pub fn from_files<P: AsRef<Path>>(
        name: &str,
        delta_mhz: f64,
        gamma_raman: f64,
        paths: &[P],
    ) -> Result<Self> {
        let mut traces = Vec::with_capacity(paths.len());
        for p in paths {
            let p = p.as_ref();
            let (trace, meta) = read_trace(p)?;
            let pulse = meta.pulse.ok_or_else(|| {
                Error::invalid(format!("{}: sidecar has no pulse description", p.display()))
            })?;
            traces.push(TraceRecord { pulse, trace });
        }
        let ds = Dataset {
            name: name.to_string(),
            delta_mhz,
            gamma_raman,
            traces,
        };
        ds.validate()?;
        Ok(ds)
    }

    /// Simulate one trace per pulse length with `model`, Poissonized when
    /// `noise` is given (trace `k` uses seed `noise.seed + k`).
    pub fn simulate(
        name: &str,
        delta_mhz: f64,
        gamma_raman: f64,
        model: &dyn TraceSimulator,
        lengths: &[f64],
        sweep: &SweepOptions,
        noise: Option<NoiseOptions>,
    ) -> Result<Self> {
        let traces = lengths
            .par_iter()
            .enumerate()
            .map(|(k, &len)| {
                let pulse = sweep.pulse(len)?;
                let edges = sweep.bin_edges(len)?;
                let clean = model.simulate(&pulse, &edges)?;
                let trace = match noise {
                    Some(n) => poissonize(&clean, n.n_measurements, n.efficiency, n.seed + k as u64)?,
                    None => clean,
                };
                Ok(TraceRecord { pulse, trace })
            })
            .collect::<Result<Vec<_>>>()?;
        let ds = Dataset {
            name: name.to_string(),
            delta_mhz,
            gamma_raman,
            traces,
        };
        ds.validate()?;
        Ok(ds)
    }

    /// Synthetic dataset generated by the four-level model at `set`.
    pub fn synthetic(
        name: &str,
        set: &CalibratedSet,
        lengths: &[f64],
        sweep: &SweepOptions,
        noise: Option<NoiseOptions>,
    ) -> Result<Self> {
        let model = crate::superatom::FourLevelModel::new(set.effective());
        let sweep = SweepOptions {
            peak_rate: set.r_p,
            ..*sweep
        };
        Self::simulate(name, set.delta_mhz, set.gamma_raman, &model, lengths, &sweep, noise)
    }

    pub fn validate(&self) -> Result<()> {
        if self.traces.is_empty() {
            return Err(Error::invalid(format!("dataset {:?} has no traces", self.name)));
        }
        if !(self.gamma_raman >= 0.0 && self.gamma_raman.is_finite()) {
            return Err(Error::invalid("gamma_raman must be finite and non-negative"));
        }
        if !(self.delta_mhz > 0.0 && self.delta_mhz.is_finite()) {
            return Err(Error::invalid("delta_mhz must be positive"));
        }
        for r in &self.traces {
            r.pulse.validate()?;
            r.trace.validate()?;
        }
        Ok(())
    }

    /// Flat-top probe rate of the longest pulse.
    pub fn r_p(&self) -> f64 {
        self.traces
            .iter()
            .max_by(|a, b| a.pulse.duration.total_cmp(&b.pulse.duration))
            .map(|r| r.pulse.peak_rate)
            .unwrap_or(0.0)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Kind {
    Kappa,
    Varkappa,
    GammaD,
}

impl Kind {
    fn label(self) -> &'static str {
        match self {
            Kind::Kappa => "kappa",
            Kind::Varkappa => "varkappa",
            Kind::GammaD => "gamma_d",
        }
    }
}

/// Search box for each rate (1/µs).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Bounds {
    pub kappa: (f64, f64),
    pub varkappa: (f64, f64),
    pub gamma_d: (f64, f64),
}

impl Default for Bounds {
    fn default() -> Self {
        Bounds {
            kappa: (0.05, 2.0),
            varkappa: (0.0, 2.0),
            gamma_d: (0.05, 3.0),
        }
    }
}

impl Bounds {
    fn get(&self, kind: Kind) -> (f64, f64) {
        match kind {
            Kind::Kappa => self.kappa,
            Kind::Varkappa => self.varkappa,
            Kind::GammaD => self.gamma_d,
        }
    }

    fn validate(&self) -> Result<()> {
        for kind in [Kind::Kappa, Kind::Varkappa, Kind::GammaD] {
            let (lo, hi) = self.get(kind);
            if !(lo.is_finite() && hi.is_finite() && lo >= 0.0 && hi > lo) {
                return Err(Error::invalid(format!(
                    "bounds for {} must satisfy 0 <= lo < hi, got ({lo}, {hi})",
                    kind.label()
                )));
            }
        }
        Ok(())
    }
}

/// Which rates are fitted; the others stay at [`CalibrationProblem::fixed`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FreeParams {
    pub kappa: bool,
    pub varkappa: bool,
    pub gamma_d: bool,
}

impl Default for FreeParams {
    fn default() -> Self {
        FreeParams {
            kappa: true,
            varkappa: true,
            gamma_d: true,
        }
    }
}

/// Values used for parameters that are not fitted.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FixedValues {
    pub kappa: f64,
    pub varkappa: f64,
    pub gamma_d: f64,
}

impl Default for FixedValues {
    fn default() -> Self {
        FixedValues {
            kappa: 0.5,
            varkappa: 0.0,
            gamma_d: 0.0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Weighting {
    /// Poisson variances for count traces, unit weights for rate traces.
    #[default]
    Auto,
    Poisson,
    Uniform,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CalibrationOptions {
    /// Random Nelder–Mead starts in addition to the stage-1 start.
    pub n_starts: usize,
    pub seed: u64,
    pub max_iters: u64,
    /// Relative spread of the simplex losses at which a start stops.
    pub simplex_tolerance: f64,
    pub weighting: Weighting,
    /// Residual weight of bins before the probe switches off.
    pub pulse_weight: f64,
    /// Residual weight of bins after the probe switches off.
    pub decay_weight: f64,
    /// Re-fit γ_D on the post-pulse bins after the joint optimum is found.
    pub gamma_d_pass: bool,
    pub polish: bool,
    /// Relative tolerance of the model propagation.
    pub rtol: f64,
    pub analysis: AnalysisOptions,
    /// Level of the consistency test in [`joint_fit`].
    pub significance: f64,
}

impl Default for CalibrationOptions {
    fn default() -> Self {
        CalibrationOptions {
            n_starts: 8,
            seed: 0,
            max_iters: 300,
            simplex_tolerance: 1e-7,
            weighting: Weighting::Auto,
            pulse_weight: 1.0,
            decay_weight: 1.0,
            gamma_d_pass: true,
            polish: true,
            rtol: 1e-8,
            analysis: AnalysisOptions::default(),
            significance: 1e-3,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CalibrationProblem {
    pub datasets: Vec<Dataset>,
    pub free: FreeParams,
    pub bounds: Bounds,
    pub fixed: FixedValues,
    /// One γ_D for all datasets.
    pub shared_gamma_d: bool,
    /// κ_i = κ_ref (Δ_ref/Δ_i)² with the first dataset as reference.
    pub kappa_law: bool,
    pub options: CalibrationOptions,
}

impl CalibrationProblem {
    pub fn new(datasets: Vec<Dataset>) -> Self {
        CalibrationProblem {
            datasets,
            free: FreeParams::default(),
            bounds: Bounds::default(),
            fixed: FixedValues::default(),
            shared_gamma_d: true,
            kappa_law: false,
            options: CalibrationOptions::default(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.datasets.is_empty() {
            return Err(Error::invalid("calibration needs at least one dataset"));
        }
        for d in &self.datasets {
            d.validate()?;
        }
        self.bounds.validate()?;
        let f = &self.fixed;
        if [f.kappa, f.varkappa, f.gamma_d].iter().any(|v| !(v.is_finite() && *v >= 0.0)) {
            return Err(Error::invalid("fixed rates must be finite and non-negative"));
        }
        let o = &self.options;
        if !(o.pulse_weight >= 0.0 && o.decay_weight >= 0.0) || o.pulse_weight + o.decay_weight == 0.0 {
            return Err(Error::invalid("region weights must be non-negative and not both zero"));
        }
        if !(o.rtol > 0.0) {
            return Err(Error::invalid("rtol must be positive"));
        }
        if self.options.weighting == Weighting::Poisson
            && self.datasets.iter().flat_map(|d| &d.traces).any(|r| !r.trace.is_counts())
        {
            return Err(Error::invalid("Poisson weighting needs count traces"));
        }
        Ok(())
    }

    fn single(&self, index: usize) -> CalibrationProblem {
        CalibrationProblem {
            datasets: vec![self.datasets[index].clone()],
            ..self.clone()
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Target {
    Dataset(usize),
    All,
    /// Reference κ at dataset 0's detuning, rescaled for the others.
    Law,
}

#[derive(Debug, Clone, PartialEq)]
struct Slot {
    kind: Kind,
    target: Target,
    bounds: (f64, f64),
}

#[derive(Debug, Clone)]
struct Layout {
    slots: Vec<Slot>,
}

impl Layout {
    fn new(p: &CalibrationProblem) -> Self {
        let n = p.datasets.len();
        let mut slots = Vec::new();
        let mut push = |kind: Kind, target: Target| {
            slots.push(Slot {
                kind,
                target,
                bounds: p.bounds.get(kind),
            })
        };
        if p.free.kappa {
            if p.kappa_law && n > 1 {
                push(Kind::Kappa, Target::Law);
            } else {
                (0..n).for_each(|i| push(Kind::Kappa, Target::Dataset(i)));
            }
        }
        if p.free.varkappa {
            (0..n).for_each(|i| push(Kind::Varkappa, Target::Dataset(i)));
        }
        if p.free.gamma_d {
            if p.shared_gamma_d && n > 1 {
                push(Kind::GammaD, Target::All);
            } else {
                (0..n).for_each(|i| push(Kind::GammaD, Target::Dataset(i)));
            }
        }
        Layout { slots }
    }

    fn len(&self) -> usize {
        self.slots.len()
    }

    fn names(&self, p: &CalibrationProblem) -> Vec<String> {
        self.slots
            .iter()
            .map(|s| match s.target {
                Target::Dataset(i) if p.datasets.len() > 1 => {
                    format!("{}[{}]", s.kind.label(), p.datasets[i].name)
                }
                Target::Law => format!("{}_ref", s.kind.label()),
                _ => s.kind.label().to_string(),
            })
            .collect()
    }

    fn clamp(&self, x: &[f64]) -> Vec<f64> {
        x.iter()
            .zip(&self.slots)
            .map(|(v, s)| v.clamp(s.bounds.0, s.bounds.1))
            .collect()
    }

    /// Rates of every dataset for parameter vector `x`.
    fn effective(&self, p: &CalibrationProblem, x: &[f64]) -> Vec<EffectiveParams> {
        let delta0 = p.datasets[0].delta_mhz;
        let mut out: Vec<EffectiveParams> = p
            .datasets
            .iter()
            .map(|d| {
                EffectiveParams::new(
                    p.fixed.kappa,
                    d.gamma_raman,
                    p.fixed.gamma_d,
                    p.fixed.varkappa,
                    d.r_p(),
                )
            })
            .collect();
        for (slot, &v) in self.slots.iter().zip(x) {
            for (i, eff) in out.iter_mut().enumerate() {
                let value = match slot.target {
                    Target::Dataset(j) if j != i => continue,
                    Target::Law => v * (delta0 / p.datasets[i].delta_mhz).powi(2),
                    _ => v,
                };
                match slot.kind {
                    Kind::Kappa => eff.kappa = value,
                    Kind::Varkappa => eff.varkappa = value,
                    Kind::GammaD => eff.gamma_d = value,
                }
            }
        }
        out
    }

    /// Parameter vector reproducing per-dataset rates as closely as the
    /// layout allows.
    fn from_effective(&self, p: &CalibrationProblem, effs: &[EffectiveParams]) -> Vec<f64> {
        let delta0 = p.datasets[0].delta_mhz;
        let pick = |eff: &EffectiveParams, kind: Kind| match kind {
            Kind::Kappa => eff.kappa,
            Kind::Varkappa => eff.varkappa,
            Kind::GammaD => eff.gamma_d,
        };
        let x: Vec<f64> = self
            .slots
            .iter()
            .map(|s| match s.target {
                Target::Dataset(i) => pick(&effs[i], s.kind),
                Target::All => median(effs.iter().map(|e| pick(e, s.kind)).collect()),
                Target::Law => median(
                    effs.iter()
                        .zip(&p.datasets)
                        .map(|(e, d)| pick(e, s.kind) * (d.delta_mhz / delta0).powi(2))
                        .collect(),
                ),
            })
            .collect();
        self.clamp(&x)
    }

    fn pinned(&self, x: &[f64]) -> Vec<bool> {
        self.slots
            .iter()
            .zip(x)
            .map(|(s, &v)| {
                let tol = 1e-4 * (s.bounds.1 - s.bounds.0);
                v - s.bounds.0 < tol || s.bounds.1 - v < tol
            })
            .collect()
    }
}

fn median(mut v: Vec<f64>) -> f64 {
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

#[derive(Debug, Clone, Copy)]
struct RegionWeights {
    pulse: f64,
    decay: f64,
}

/// Per-bin data prepared once per fit.
struct Prepared<'a> {
    problem: &'a CalibrationProblem,
    layout: Layout,
    /// (dataset, trace, bin, weight, observed, sigma)
    bins: Vec<Vec<Vec<BinRef>>>,
    poisson: Vec<Vec<bool>>,
    propagate: PropagateOptions,
    n_residuals: usize,
}

#[derive(Debug, Clone, Copy)]
struct BinRef {
    index: usize,
    weight: f64,
    observed: f64,
    sigma: f64,
}

impl<'a> Prepared<'a> {
    fn new(problem: &'a CalibrationProblem, layout: Layout, weights: RegionWeights) -> Self {
        let o = &problem.options;
        let mut n_residuals = 0;
        let mut bins = Vec::new();
        let mut poisson = Vec::new();
        for d in &problem.datasets {
            let mut dbins = Vec::new();
            let mut dpois = Vec::new();
            for r in &d.traces {
                let use_poisson = match o.weighting {
                    Weighting::Auto | Weighting::Poisson => r.trace.is_counts(),
                    Weighting::Uniform => false,
                };
                let off = r.pulse.switch_off_time(o.analysis.switch_off_fraction);
                let centers = r.trace.bin_centers();
                let rates = r.trace.rates();
                let mut tb = Vec::new();
                for (i, &c) in centers.iter().enumerate() {
                    let w = if c < off { weights.pulse } else { weights.decay };
                    if w == 0.0 {
                        continue;
                    }
                    let (observed, sigma) = match (use_poisson, r.trace.counts()) {
                        (true, Some(k)) => (k[i] as f64, (k[i].max(1) as f64).sqrt()),
                        _ => (rates[i] - o.analysis.background, 1.0),
                    };
                    tb.push(BinRef {
                        index: i,
                        weight: w,
                        observed,
                        sigma,
                    });
                }
                n_residuals += tb.len();
                dbins.push(tb);
                dpois.push(use_poisson);
            }
            bins.push(dbins);
            poisson.push(dpois);
        }
        let propagate = PropagateOptions::default()
            .with_rtol(o.rtol)
            .with_atol(1e-3 * o.rtol);
        Prepared {
            problem,
            layout,
            bins,
            poisson,
            propagate,
            n_residuals,
        }
    }

    /// Model rates of every trace at rates `effs`.
    fn model_rates(&self, effs: &[EffectiveParams]) -> Result<Vec<Vec<Vec<f64>>>> {
        self.problem
            .datasets
            .iter()
            .zip(effs)
            .map(|(d, eff)| {
                d.traces
                    .par_iter()
                    .map(|r| {
                        let e = eff.with_r_p(r.pulse.peak_rate);
                        Ok(simulate_trace(&e, &r.pulse, &r.trace.bin_edges, &self.propagate)?
                            .trace
                            .rates())
                    })
                    .collect::<Result<Vec<_>>>()
            })
            .collect()
    }

    fn residuals(&self, x: &[f64]) -> Option<Vec<f64>> {
        let x = self.layout.clamp(x);
        let effs = self.layout.effective(self.problem, &x);
        let model = self.model_rates(&effs).ok()?;
        let mut out = Vec::with_capacity(self.n_residuals);
        for (di, d) in self.problem.datasets.iter().enumerate() {
            for (ti, r) in d.traces.iter().enumerate() {
                let pois = self.poisson[di][ti];
                for b in &self.bins[di][ti] {
                    let m = model[di][ti][b.index];
                    let predicted = if pois { m * r.trace.exposure(b.index) } else { m };
                    out.push(b.weight * (b.observed - predicted) / b.sigma);
                }
            }
        }
        out.iter().all(|v| v.is_finite()).then_some(out)
    }

    fn loss(&self, x: &[f64]) -> f64 {
        self.residuals(x)
            .map(|r| r.iter().map(|v| v * v).sum())
            .unwrap_or(f64::INFINITY)
    }

    /// Central-difference Jacobian of the residuals.
    fn jacobian(&self, x: &[f64]) -> Option<DMatrix<f64>> {
        let cols: Vec<Vec<f64>> = (0..x.len())
            .into_par_iter()
            .map(|k| {
                let (lo, hi) = self.layout.slots[k].bounds;
                let h = 1e-4 * (hi - lo);
                let mut xp = x.to_vec();
                let mut xm = x.to_vec();
                xp[k] = (x[k] + h).min(hi);
                xm[k] = (x[k] - h).max(lo);
                let step = xp[k] - xm[k];
                let rp = self.residuals(&xp)?;
                let rm = self.residuals(&xm)?;
                Some(rp.iter().zip(&rm).map(|(a, b)| (a - b) / step).collect())
            })
            .collect::<Option<Vec<_>>>()?;
        let m = cols.first().map_or(0, |c| c.len());
        Some(DMatrix::from_fn(m, x.len(), |i, j| cols[j][i]))
    }
}

struct SimplexCost<'p, 'a> {
    prep: &'p Prepared<'a>,
    scale: f64,
}

impl CostFunction for SimplexCost<'_, '_> {
    type Param = Vec<f64>;
    type Output = f64;

    fn cost(&self, x: &Self::Param) -> std::result::Result<f64, argmin::core::Error> {
        let clamped = self.prep.layout.clamp(x);
        let outside: f64 = x
            .iter()
            .zip(&clamped)
            .zip(&self.prep.layout.slots)
            .map(|((a, b), s)| ((a - b) / (s.bounds.1 - s.bounds.0)).powi(2))
            .sum();
        let loss = self.prep.loss(&clamped) / self.scale;
        Ok(if loss.is_finite() { loss * (1.0 + outside) + outside } else { 1e300 })
    }
}

/// Outcome of one Nelder–Mead start.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StartReport {
    pub start: Vec<f64>,
    pub end: Vec<f64>,
    pub loss: f64,
    pub iterations: u64,
    pub converged: bool,
}

fn simplex(prep: &Prepared, start: &[f64], opts: &CalibrationOptions, scale: f64) -> StartReport {
    let start = prep.layout.clamp(start);
    let mut vertices = vec![start.clone()];
    for (k, s) in prep.layout.slots.iter().enumerate() {
        let mut v = start.clone();
        let step = 0.1 * (s.bounds.1 - s.bounds.0);
        v[k] = if v[k] + step <= s.bounds.1 { v[k] + step } else { v[k] - step };
        vertices.push(v);
    }
    let cost = SimplexCost { prep, scale };
    let solver = NelderMead::new(vertices)
        .with_sd_tolerance(opts.simplex_tolerance)
        .expect("positive tolerance");
    let result = Executor::new(cost, solver)
        .configure(|s| s.max_iters(opts.max_iters))
        .run();
    match result {
        Ok(res) => {
            let state = res.state();
            let end = prep.layout.clamp(state.get_best_param().unwrap_or(&start));
            let iterations = state.get_iter();
            StartReport {
                loss: prep.loss(&end),
                start,
                end,
                iterations,
                converged: iterations < opts.max_iters,
            }
        }
        Err(_) => StartReport {
            loss: f64::INFINITY,
            end: start.clone(),
            start,
            iterations: 0,
            converged: false,
        },
    }
}

struct Polish<'p, 'a> {
    prep: &'p Prepared<'a>,
    x: DVector<f64>,
}

impl LeastSquaresProblem<f64, Dyn, Dyn> for Polish<'_, '_> {
    type ResidualStorage = Owned<f64, Dyn>;
    type JacobianStorage = Owned<f64, Dyn, Dyn>;
    type ParameterStorage = Owned<f64, Dyn>;

    fn set_params(&mut self, x: &DVector<f64>) {
        self.x = DVector::from_vec(self.prep.layout.clamp(x.as_slice()));
    }

    fn params(&self) -> DVector<f64> {
        self.x.clone()
    }

    fn residuals(&self) -> Option<DVector<f64>> {
        self.prep.residuals(self.x.as_slice()).map(DVector::from_vec)
    }

    fn jacobian(&self) -> Option<DMatrix<f64>> {
        self.prep.jacobian(self.x.as_slice())
    }
}

/// Levenberg–Marquardt from `x0`; returns the end point and whether the
/// solver reported convergence.
fn polish(prep: &Prepared, x0: &[f64]) -> (Vec<f64>, bool) {
    let problem = Polish {
        prep,
        x: DVector::from_vec(prep.layout.clamp(x0)),
    };
    let (done, report) = LevenbergMarquardt::new().with_patience(30).minimize(problem);
    let x = done.x.as_slice().to_vec();
    if prep.loss(&x) <= prep.loss(x0) {
        (x, report.termination.was_successful())
    } else {
        (x0.to_vec(), false)
    }
}

/// Covariance from the Gauss–Newton approximation; uniform weights scale
/// it by the reduced residual variance.
fn covariance(prep: &Prepared, x: &[f64], loss: f64) -> Vec<Vec<f64>> {
    let p = x.len();
    let nan = vec![vec![f64::NAN; p]; p];
    let Some(j) = prep.jacobian(x) else {
        return nan;
    };
    let jtj = j.transpose() * &j;
    let Ok(inv) = jtj.clone().pseudo_inverse(1e-12 * jtj.amax().max(f64::MIN_POSITIVE)) else {
        return nan;
    };
    let all_poisson = prep.poisson.iter().flatten().all(|&b| b);
    let dof = prep.n_residuals.saturating_sub(p).max(1) as f64;
    let s2 = if all_poisson { 1.0 } else { loss / dof };
    (0..p).map(|i| (0..p).map(|k| s2 * inv[(i, k)]).collect()).collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParameterEstimate {
    pub name: String,
    pub value: f64,
    pub std_err: f64,
    /// The estimate sits on a bound of the search box.
    pub pinned: bool,
}

/// One row of the report, in the column order of the calibrated-set table.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetReport {
    pub name: String,
    pub r_p: f64,
    pub delta_mhz: f64,
    pub kappa: f64,
    pub gamma_raman: f64,
    pub gamma_d: f64,
    pub varkappa: f64,
    pub loss: f64,
    pub n_residuals: usize,
    pub reduced_chi2: f64,
    /// ‖model − data‖ / ‖data‖ over the post-pulse fit window of every trace.
    pub fit_window_residual: f64,
    /// Stage-1 coupling (ϰ = 0, pulse bins only).
    pub stage_one_kappa: f64,
}

/// Joint fit against independent fits.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConsistencyTest {
    pub joint_loss: f64,
    pub independent_loss: f64,
    pub delta_chi2: f64,
    pub dof: usize,
    pub p_value: f64,
    /// The shared-parameter model is rejected at the configured level.
    pub inconsistent: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CalibrationReport {
    pub parameters: Vec<ParameterEstimate>,
    pub covariance: Vec<Vec<f64>>,
    pub datasets: Vec<DatasetReport>,
    pub starts: Vec<StartReport>,
    pub loss: f64,
    pub n_residuals: usize,
    pub converged: bool,
    pub shared_gamma_d: bool,
    pub kappa_law: bool,
    /// Stage-1 κ·Δ² relative to its mean, per dataset.
    pub kappa_law_deviation: Vec<f64>,
    pub consistency: Option<ConsistencyTest>,
    /// Independent per-dataset fits behind a joint fit.
    pub independent: Vec<CalibrationReport>,
    pub kappa_scaling: Option<KappaScaling>,
}

impl CalibrationReport {
    pub fn parameter(&self, name: &str) -> Option<&ParameterEstimate> {
        self.parameters.iter().find(|p| p.name == name)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }
}

/// Stage 1: ϰ = 0 and only the pulse bins.
fn stage_one(problem: &CalibrationProblem) -> Result<Vec<EffectiveParams>> {
    let mut p1 = problem.clone();
    p1.free.varkappa = false;
    p1.fixed.varkappa = 0.0;
    let layout = Layout::new(&p1);
    let defaults = layout.effective(&p1, &vec![0.0; layout.len()]);
    if layout.len() == 0 {
        return Ok(defaults);
    }
    let weights = RegionWeights {
        pulse: 1.0,
        decay: 0.0,
    };
    let prep = Prepared::new(&p1, layout.clone(), weights);
    if prep.n_residuals < layout.len() {
        return Ok(layout.effective(&p1, &mid_point(&layout)));
    }
    let x0 = mid_point(&layout);
    let scale = prep.loss(&x0).max(f64::MIN_POSITIVE);
    let start = simplex(&prep, &x0, &p1.options, scale);
    let (x, _) = polish(&prep, &start.end);
    Ok(layout.effective(&p1, &x))
}

fn mid_point(layout: &Layout) -> Vec<f64> {
    layout
        .slots
        .iter()
        .map(|s| s.bounds.0 + 0.25 * (s.bounds.1 - s.bounds.0))
        .collect()
}

fn kappa_law_deviation(problem: &CalibrationProblem, stage1: &[EffectiveParams]) -> Vec<f64> {
    let scaled: Vec<f64> = stage1
        .iter()
        .zip(&problem.datasets)
        .map(|(e, d)| e.kappa * d.delta_mhz.powi(2))
        .collect();
    let mean = scaled.iter().sum::<f64>() / scaled.len() as f64;
    scaled.iter().map(|s| s / mean - 1.0).collect()
}

/// Re-fit γ_D on the post-pulse bins with everything else fixed.
fn gamma_d_pass(problem: &CalibrationProblem, layout: &Layout, x: &[f64]) -> Vec<f64> {
    let effs = layout.effective(problem, x);
    let mut sub = problem.clone();
    sub.free = FreeParams {
        kappa: false,
        varkappa: false,
        gamma_d: true,
    };
    let mut out = x.to_vec();
    let gd_slots: Vec<usize> = layout
        .slots
        .iter()
        .enumerate()
        .filter(|(_, s)| s.kind == Kind::GammaD)
        .map(|(k, _)| k)
        .collect();
    for &k in &gd_slots {
        let members: Vec<usize> = match layout.slots[k].target {
            Target::Dataset(i) => vec![i],
            _ => (0..problem.datasets.len()).collect(),
        };
        let fitted = fit_gamma_d_only(&sub, &effs, &members, layout.slots[k].bounds, x[k]);
        out[k] = fitted;
    }
    out
}

fn fit_gamma_d_only(
    sub: &CalibrationProblem,
    effs: &[EffectiveParams],
    members: &[usize],
    bounds: (f64, f64),
    start: f64,
) -> f64 {
    let weights = RegionWeights {
        pulse: 0.0,
        decay: 1.0,
    };
    let preps: Vec<(CalibrationProblem, Layout)> = members
        .iter()
        .map(|&i| {
            let mut p = sub.single(i);
            p.fixed = FixedValues {
                kappa: effs[i].kappa,
                varkappa: effs[i].varkappa,
                gamma_d: 0.0,
            };
            let mut layout = Layout::new(&p);
            layout.slots[0].bounds = bounds;
            (p, layout)
        })
        .collect();
    let prepared: Vec<Prepared> = preps
        .iter()
        .map(|(p, l)| Prepared::new(p, l.clone(), weights))
        .collect();
    if prepared.iter().map(|p| p.n_residuals).sum::<usize>() == 0 {
        return start;
    }
    let loss = |g: f64| -> f64 { prepared.iter().map(|p| p.loss(&[g])).sum() };
    golden_section(loss, bounds, start)
}

/// Bracketed 1-D minimization: coarse scan around `start`, then golden
/// section on the best bracket.
fn golden_section(f: impl Fn(f64) -> f64, bounds: (f64, f64), start: f64) -> f64 {
    let (lo, hi) = bounds;
    let n = 24;
    let grid: Vec<f64> = (0..=n)
        .map(|k| lo + (hi - lo) * k as f64 / n as f64)
        .chain(std::iter::once(start.clamp(lo, hi)))
        .collect();
    let vals: Vec<f64> = grid.iter().map(|&g| f(g)).collect();
    let best = (0..grid.len()).min_by(|&a, &b| vals[a].total_cmp(&vals[b])).unwrap();
    let centre = grid[best];
    let h = (hi - lo) / n as f64;
    let (mut a, mut b) = ((centre - h).max(lo), (centre + h).min(hi));
    let r = 0.5 * (5f64.sqrt() - 1.0);
    let mut c = b - r * (b - a);
    let mut d = a + r * (b - a);
    let (mut fc, mut fd) = (f(c), f(d));
    for _ in 0..60 {
        if (b - a) < 1e-9 * (1.0 + centre.abs()) {
            break;
        }
        if fc < fd {
            b = d;
            d = c;
            fd = fc;
            c = b - r * (b - a);
            fc = f(c);
        } else {
            a = c;
            c = d;
            fc = fd;
            d = a + r * (b - a);
            fd = f(d);
        }
    }
    let x = 0.5 * (a + b);
    if f(x) <= vals[best] {
        x
    } else {
        centre
    }
}

/// Fitted-model rates against the data over the post-pulse fit window.
fn fit_window_residual(d: &Dataset, eff: &EffectiveParams, opts: &CalibrationOptions) -> f64 {
    let propagate = PropagateOptions::default().with_rtol(opts.rtol).with_atol(1e-3 * opts.rtol);
    let (mut num, mut den) = (0.0, 0.0);
    for r in &d.traces {
        let Ok(th) = apply_threshold(&r.trace, &opts.analysis) else {
            continue;
        };
        let Ok(sim) = simulate_trace(&eff.with_r_p(r.pulse.peak_rate), &r.pulse, &r.trace.bin_edges, &propagate)
        else {
            return f64::NAN;
        };
        let model = sim.trace.rates();
        let data = r.trace.rates();
        let window = FitWindow::after_pulse(&r.pulse, opts.analysis.switch_off_fraction);
        let Some(first) = r.trace.bin_edges.iter().position(|&e| e >= window.start - 1e-12) else {
            continue;
        };
        for i in first..data.len() {
            if !th.included[i] || r.trace.bin_edges[i + 1] > window.end + 1e-12 {
                break;
            }
            let obs = data[i] - opts.analysis.background;
            num += (model[i] - obs).powi(2);
            den += obs * obs;
        }
    }
    if den > 0.0 {
        (num / den).sqrt()
    } else {
        f64::NAN
    }
}

fn build_report(
    problem: &CalibrationProblem,
    prep: &Prepared,
    x: &[f64],
    starts: Vec<StartReport>,
    stage1: &[EffectiveParams],
    converged: bool,
) -> CalibrationReport {
    let layout = &prep.layout;
    let residuals = prep.residuals(x).unwrap_or_default();
    let loss: f64 = residuals.iter().map(|v| v * v).sum();
    let cov = covariance(prep, x, loss);
    let names = layout.names(problem);
    let pinned = layout.pinned(x);
    let parameters = (0..x.len())
        .map(|k| ParameterEstimate {
            name: names[k].clone(),
            value: x[k],
            std_err: cov[k][k].max(0.0).sqrt(),
            pinned: pinned[k],
        })
        .collect();
    let effs = layout.effective(problem, x);
    let mut offset = 0;
    let datasets = problem
        .datasets
        .iter()
        .enumerate()
        .map(|(i, d)| {
            let n: usize = prep.bins[i].iter().map(|b| b.len()).sum();
            let l: f64 = residuals.get(offset..offset + n).map_or(f64::NAN, |r| r.iter().map(|v| v * v).sum());
            offset += n;
            let e = effs[i];
            DatasetReport {
                name: d.name.clone(),
                r_p: d.r_p(),
                delta_mhz: d.delta_mhz,
                kappa: e.kappa,
                gamma_raman: e.gamma_raman,
                gamma_d: e.gamma_d,
                varkappa: e.varkappa,
                loss: l,
                n_residuals: n,
                reduced_chi2: l / (n.max(1) as f64),
                fit_window_residual: fit_window_residual(d, &e, &problem.options),
                stage_one_kappa: stage1[i].kappa,
            }
        })
        .collect();
    CalibrationReport {
        parameters,
        covariance: cov,
        datasets,
        starts,
        loss,
        n_residuals: prep.n_residuals,
        converged,
        shared_gamma_d: problem.shared_gamma_d && problem.datasets.len() > 1,
        kappa_law: problem.kappa_law && problem.datasets.len() > 1,
        kappa_law_deviation: kappa_law_deviation(problem, stage1),
        consistency: None,
        independent: Vec::new(),
        kappa_scaling: None,
    }
}

fn default_weights(o: &CalibrationOptions) -> RegionWeights {
    RegionWeights {
        pulse: o.pulse_weight,
        decay: o.decay_weight,
    }
}

fn check_posed(prep: &Prepared) -> Result<()> {
    if prep.layout.len() == 0 {
        return Err(Error::invalid("no free parameters"));
    }
    if prep.n_residuals < prep.layout.len() {
        return Err(Error::InsufficientData {
            needed: prep.layout.len(),
            found: prep.n_residuals,
        });
    }
    Ok(())
}

/// Two-stage multi-start fit of the four-level model.
pub fn fit_model_to_traces(problem: &CalibrationProblem) -> Result<CalibrationReport> {
    problem.validate()?;
    let layout = Layout::new(problem);
    let prep = Prepared::new(problem, layout.clone(), default_weights(&problem.options));
    check_posed(&prep)?;
    let opts = &problem.options;

    let stage1 = stage_one(problem)?;
    let mut seeded = stage1.clone();
    for e in seeded.iter_mut() {
        e.varkappa = e.kappa.clamp(problem.bounds.varkappa.0, problem.bounds.varkappa.1);
    }
    let mut starts = vec![layout.from_effective(problem, &seeded)];
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    for _ in 0..opts.n_starts {
        starts.push(
            layout
                .slots
                .iter()
                .map(|s| rng.random_range(s.bounds.0..=s.bounds.1))
                .collect(),
        );
    }
    let scale = prep.loss(&starts[0]).max(f64::MIN_POSITIVE);
    let scale = if scale.is_finite() { scale } else { 1.0 };
    let reports: Vec<StartReport> = starts.par_iter().map(|s| simplex(&prep, s, opts, scale)).collect();
    let best = reports
        .iter()
        .filter(|r| r.loss.is_finite())
        .min_by(|a, b| a.loss.total_cmp(&b.loss))
        .ok_or_else(|| Error::NonConvergence("no start produced a finite loss".into()))?;
    let mut x = best.end.clone();
    let mut converged = best.converged;
    if opts.polish {
        let (xp, ok) = polish(&prep, &x);
        x = xp;
        converged |= ok;
    }
    if opts.gamma_d_pass && problem.free.gamma_d {
        x = gamma_d_pass(problem, &layout, &x);
    }
    if !converged {
        return Err(Error::NonConvergence(format!(
            "best start stopped after {} iterations without meeting the tolerance",
            best.iterations
        )));
    }
    Ok(build_report(problem, &prep, &x, reports, &stage1, converged))
}

/// Fit several datasets with shared γ_D (and κ ∝ 1/Δ² when requested).
///
/// Each dataset is first fitted on its own; the joint fit starts from those
/// results. The loss increase of the joint fit over the independent fits is
/// tested against a χ² distribution and flagged when significant.
pub fn joint_fit(problem: &CalibrationProblem) -> Result<CalibrationReport> {
    problem.validate()?;
    if problem.datasets.len() == 1 {
        return fit_model_to_traces(problem);
    }
    let mut deltas: Vec<f64> = problem.datasets.iter().map(|d| d.delta_mhz).collect();
    deltas.sort_by(f64::total_cmp);
    if problem.kappa_law && deltas.windows(2).any(|w| w[0] == w[1]) {
        return Err(Error::invalid("κ ∝ 1/Δ² needs datasets with distinct Δ"));
    }
    let independent: Vec<CalibrationReport> = (0..problem.datasets.len())
        .map(|i| fit_model_to_traces(&problem.single(i)))
        .collect::<Result<_>>()?;
    let effs: Vec<EffectiveParams> = independent
        .iter()
        .zip(&problem.datasets)
        .map(|(r, d)| {
            let row = &r.datasets[0];
            EffectiveParams::new(row.kappa, d.gamma_raman, row.gamma_d, row.varkappa, d.r_p())
        })
        .collect();
    let stage1: Vec<EffectiveParams> = independent
        .iter()
        .zip(&effs)
        .map(|(r, e)| EffectiveParams {
            kappa: r.datasets[0].stage_one_kappa,
            ..*e
        })
        .collect();

    let layout = Layout::new(problem);
    let prep = Prepared::new(problem, layout.clone(), default_weights(&problem.options));
    check_posed(&prep)?;
    let x0 = layout.from_effective(problem, &effs);
    let scale = prep.loss(&x0).max(f64::MIN_POSITIVE);
    let scale = if scale.is_finite() { scale } else { 1.0 };
    let start = simplex(&prep, &x0, &problem.options, scale);
    let mut x = start.end.clone();
    let mut converged = start.converged;
    if problem.options.polish {
        let (xp, ok) = polish(&prep, &x);
        x = xp;
        converged |= ok;
    }
    let joint_loss = prep.loss(&x);
    if problem.options.gamma_d_pass && problem.free.gamma_d {
        x = gamma_d_pass(problem, &layout, &x);
    }
    if !converged {
        return Err(Error::NonConvergence("joint fit did not converge".into()));
    }

    let independent_loss: f64 = independent
        .iter()
        .enumerate()
        .map(|(i, r)| {
            let single = problem.single(i);
            let l = Layout::new(&single);
            let p = Prepared::new(&single, l.clone(), default_weights(&problem.options));
            let xs: Vec<f64> = r.parameters.iter().map(|e| e.value).collect();
            // Use the optimum before the γ_D pass, like the joint loss.
            p.loss(&xs).min(r.loss)
        })
        .sum();
    let n_independent: usize = independent.iter().map(|r| r.parameters.len()).sum();
    let dof = n_independent.saturating_sub(layout.len());
    let consistency = consistency_test(
        joint_loss,
        independent_loss,
        dof,
        &prep,
        n_independent,
        problem.options.significance,
    );

    let mut report = build_report(problem, &prep, &x, vec![start], &stage1, converged);
    report.consistency = consistency;
    report.independent = independent;
    Ok(report)
}

fn consistency_test(
    joint: f64,
    independent: f64,
    dof: usize,
    prep: &Prepared,
    n_params: usize,
    level: f64,
) -> Option<ConsistencyTest> {
    if dof == 0 {
        return None;
    }
    let all_poisson = prep.poisson.iter().flatten().all(|&b| b);
    let s2 = if all_poisson {
        1.0
    } else {
        independent / prep.n_residuals.saturating_sub(n_params).max(1) as f64
    };
    let delta = ((joint - independent) / s2.max(f64::MIN_POSITIVE)).max(0.0);
    let p_value = ChiSquared::new(dof as f64).map(|d| 1.0 - d.cdf(delta)).unwrap_or(f64::NAN);
    Some(ConsistencyTest {
        joint_loss: joint,
        independent_loss: independent,
        delta_chi2: delta,
        dof,
        p_value,
        inconsistent: p_value < level,
    })
}

/// Weighted straight-line fit ϰ = slope·κ + intercept.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct KappaScaling {
    pub slope: f64,
    pub intercept: f64,
    pub slope_err: f64,
    pub intercept_err: f64,
    pub r_squared: f64,
    pub n_points: usize,
}

/// Regress `(κ, ϰ)` pairs; `weights` are inverse variances and default to
/// uniform.
pub fn kappa_scaling(points: &[(f64, f64)], weights: Option<&[f64]>) -> Result<KappaScaling> {
    let n = points.len();
    if n < 3 {
        return Err(Error::InsufficientData { needed: 3, found: n });
    }
    if points.iter().any(|(x, y)| !x.is_finite() || !y.is_finite()) {
        return Err(Error::invalid("scaling points must be finite"));
    }
    let w: Vec<f64> = match weights {
        Some(w) if w.len() != n => {
            return Err(Error::DimensionMismatch {
                expected: n,
                found: w.len(),
            })
        }
        Some(w) if w.iter().all(|v| v.is_finite() && *v > 0.0) => w.to_vec(),
        _ => vec![1.0; n],
    };
    let sw: f64 = w.iter().sum();
    let xm = points.iter().zip(&w).map(|((x, _), w)| w * x).sum::<f64>() / sw;
    let ym = points.iter().zip(&w).map(|((_, y), w)| w * y).sum::<f64>() / sw;
    let sxx: f64 = points.iter().zip(&w).map(|((x, _), w)| w * (x - xm).powi(2)).sum();
    let sxy: f64 = points.iter().zip(&w).map(|((x, y), w)| w * (x - xm) * (y - ym)).sum();
    let syy: f64 = points.iter().zip(&w).map(|((_, y), w)| w * (y - ym).powi(2)).sum();
    let spread = points.iter().map(|p| p.0).fold(f64::NEG_INFINITY, f64::max)
        - points.iter().map(|p| p.0).fold(f64::INFINITY, f64::min);
    if !(spread > 1e-12 * (1.0 + xm.abs())) {
        return Err(Error::Degenerate("all abscissae are equal".into()));
    }
    let slope = sxy / sxx;
    let intercept = ym - slope * xm;
    let ss_res: f64 = points
        .iter()
        .zip(&w)
        .map(|((x, y), w)| w * (y - slope * x - intercept).powi(2))
        .sum();
    let s2 = ss_res / (n - 2) as f64 * n as f64 / sw;
    let slope_err = (s2 / sxx * sw / n as f64).sqrt();
    let intercept_err = (s2 * (1.0 / sw + xm * xm / sxx) * sw / n as f64).sqrt();
    let r_squared = if syy > 0.0 {
        1.0 - ss_res / syy
    } else if ss_res == 0.0 {
        1.0
    } else {
        0.0
    };
    Ok(KappaScaling {
        slope,
        intercept,
        slope_err,
        intercept_err,
        r_squared,
        n_points: n,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    #[test]
    fn exact_line() {
        let pts: Vec<(f64, f64)> = [0.25, 0.45, 0.7, 1.0].iter().map(|&k| (k, 0.7 * k)).collect();
        let s = kappa_scaling(&pts, None).unwrap();
        assert_relative_eq!(s.slope, 0.7, epsilon = 1e-12);
        assert_relative_eq!(s.intercept, 0.0, epsilon = 1e-12);
        assert_relative_eq!(s.r_squared, 1.0, epsilon = 1e-12);
    }

    #[test]
    fn constant_series_has_zero_slope() {
        let pts = [(0.2, 0.31), (0.3, 0.33), (0.46, 0.30), (0.6, 0.32)];
        let s = kappa_scaling(&pts, None).unwrap();
        assert!(s.slope.abs() < 2.0 * s.slope_err, "{s:?}");
    }

    #[test]
    fn degenerate_abscissae() {
        let pts = [(0.5, 0.1), (0.5, 0.2), (0.5, 0.3)];
        assert!(matches!(kappa_scaling(&pts, None), Err(Error::Degenerate(_))));
        assert!(matches!(
            kappa_scaling(&pts[..2], None),
            Err(Error::InsufficientData { .. })
        ));
    }

    #[test]
    fn weighted_fit_matches_unweighted_for_equal_weights() {
        let pts = [(0.1, 0.2), (0.4, 0.5), (0.8, 0.75), (1.0, 1.1)];
        let a = kappa_scaling(&pts, None).unwrap();
        let b = kappa_scaling(&pts, Some(&[3.0; 4])).unwrap();
        assert_relative_eq!(a.slope, b.slope, epsilon = 1e-12);
        assert_relative_eq!(a.slope_err, b.slope_err, epsilon = 1e-12);
        assert_relative_eq!(a.intercept_err, b.intercept_err, epsilon = 1e-12);
    }

    #[test]
    fn golden_section_finds_parabola_minimum() {
        let x = golden_section(|g| (g - 0.85).powi(2), (0.05, 3.0), 1.0);
        assert_relative_eq!(x, 0.85, epsilon = 1e-7);
    }

    #[test]
    fn layout_shares_and_scales() {
        let set = crate::params::CALIBRATED_SETS;
        let sweep = SweepOptions {
            post_window: 1.0,
            ..Default::default()
        };
        let ds: Vec<Dataset> = set[..2]
            .iter()
            .enumerate()
            .map(|(i, s)| Dataset::synthetic(&format!("d{i}"), s, &[0.5], &sweep, None).unwrap())
            .collect();
        let mut p = CalibrationProblem::new(ds);
        p.kappa_law = true;
        let layout = Layout::new(&p);
        assert_eq!(
            layout.names(&p),
            ["kappa_ref", "varkappa[d0]", "varkappa[d1]", "gamma_d"]
        );
        let effs = layout.effective(&p, &[0.46, 0.31, 0.32, 0.85]);
        assert_relative_eq!(effs[1].kappa, 0.46 * 0.64, epsilon = 1e-12);
        assert_eq!(effs[0].gamma_d, effs[1].gamma_d);
        assert_eq!(effs[1].gamma_raman, 0.10);
    }

    #[test]
    fn empty_problem_is_rejected() {
        let p = CalibrationProblem::new(Vec::new());
        assert!(fit_model_to_traces(&p).is_err());
    }
}

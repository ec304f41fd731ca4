//! The effective four-level superatom: ground |G⟩, bright |W⟩, one
//! coherently coupled subradiant state |C⟩ and a dark reservoir |D⟩.

use std::sync::Arc;

use num_complex::Complex64 as C64;

use crate::error::{Error, Result};
use crate::lindblad::{
    propagate, CMatrix, DensityMatrix, Diagnostics, HamiltonianTerm, JumpOperator, LindbladSystem,
    PropagateOptions,
};
use crate::ode::StepStats;
use crate::params::{collective_rabi, EffectiveParams};
use crate::pulse::PulseShape;
use crate::trace::{PhotonTrace, TraceSimulator};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Level {
    G = 0,
    W = 1,
    C = 2,
    D = 3,
}

impl Level {
    pub const ALL: [Level; 4] = [Level::G, Level::W, Level::C, Level::D];

    pub fn index(self) -> usize {
        self as usize
    }
}

pub const DIM: usize = 4;

/// Density matrix over (G, W, C, D).
#[derive(Debug, Clone, PartialEq)]
pub struct SuperatomState(pub DensityMatrix);

impl SuperatomState {
    pub fn ground() -> Self {
        SuperatomState(DensityMatrix::basis(DIM, Level::G.index()))
    }

    pub fn pure(level: Level) -> Self {
        SuperatomState(DensityMatrix::basis(DIM, level.index()))
    }

    pub fn new(rho: DensityMatrix) -> Result<Self> {
        if rho.dim() != DIM {
            return Err(Error::DimensionMismatch {
                expected: DIM,
                found: rho.dim(),
            });
        }
        Ok(SuperatomState(rho))
    }

    pub fn population(&self, level: Level) -> f64 {
        self.0.population(level.index())
    }

    /// ⟨a|ρ|b⟩.
    pub fn coherence(&self, a: Level, b: Level) -> C64 {
        self.0.entry(a.index(), b.index())
    }

    pub fn density(&self) -> &DensityMatrix {
        &self.0
    }
}

fn sigma(to: Level, from: Level) -> CMatrix {
    let mut m = CMatrix::zeros(DIM, DIM);
    m[(to.index(), from.index())] = C64::new(1.0, 0.0);
    m
}

fn sym(a: Level, b: Level) -> CMatrix {
    sigma(a, b) + sigma(b, a)
}

/// Assemble the four-level master equation for a probe pulse.
///
/// H(t) = 2√(κ R_p(t)) (σ_WG + σ_GW) + ϰ (σ_CW + σ_WC). Jumps, in order:
/// (κ+Γ, σ_GW), (γ_D, σ_DW), (Γ, σ_GD), (γ_D, σ_DC), (Γ, σ_GC).
pub fn build_system(eff: &EffectiveParams, shape: &PulseShape) -> Result<LindbladSystem> {
    build_system_detuned(eff, shape, 0.0)
}

/// [`build_system`] with a two-photon detuning δ placed as −δ on the
/// excited states W and C.
pub fn build_system_detuned(
    eff: &EffectiveParams,
    shape: &PulseShape,
    detuning: f64,
) -> Result<LindbladSystem> {
    eff.validate()?;
    shape.validate()?;
    use Level::*;
    let two_sqrt_kappa = 2.0 * eff.kappa.sqrt();
    let pulse = *shape;
    let drive = HamiltonianTerm::new(
        Arc::new(move |t| two_sqrt_kappa * pulse.amplitude(t)),
        sym(W, G),
    );
    let mut sys = LindbladSystem::new(DIM)
        .with_term(drive)?
        .with_breakpoints(shape.breakpoints());
    if eff.varkappa != 0.0 {
        sys = sys.with_term(HamiltonianTerm::constant(sym(C, W) * C64::new(eff.varkappa, 0.0)))?;
    }
    if detuning != 0.0 {
        let mut d = CMatrix::zeros(DIM, DIM);
        d[(W.index(), W.index())] = C64::new(-detuning, 0.0);
        d[(C.index(), C.index())] = C64::new(-detuning, 0.0);
        sys = sys.with_term(HamiltonianTerm::constant(d))?;
    }
    let jumps = [
        (eff.kappa + eff.gamma_raman, G, W),
        (eff.gamma_d, D, W),
        (eff.gamma_raman, G, D),
        (eff.gamma_d, D, C),
        (eff.gamma_raman, G, C),
    ];
    for (rate, to, from) in jumps {
        sys = sys.with_jump(JumpOperator::new(rate, sigma(to, from))?)?;
    }
    Ok(sys)
}

/// Photon flux in the forward mode, ⟨b_out† b_out⟩ with
/// b_out = √R_p − i√κ σ_GW:
///
/// R_p + κ ρ_WW + 2√(κ R_p) Im ρ_WG.
///
/// The phase convention matches [`build_system`]: a weak resonant drive
/// gives a rate below R_p.
pub fn forward_rate(state: &SuperatomState, eff: &EffectiveParams, r_p_now: f64) -> f64 {
    let p_w = state.population(Level::W);
    let rho_wg = state.coherence(Level::W, Level::G);
    emission_rate(eff.kappa, r_p_now, p_w, rho_wg)
}

/// Shared input–output composition: probe rate, bright population and the
/// ⟨W|ρ|G⟩ coherence.
pub(crate) fn emission_rate(kappa: f64, r_p: f64, p_bright: f64, rho_wg: C64) -> f64 {
    let interference = if r_p > 0.0 {
        2.0 * (kappa * r_p).sqrt() * rho_wg.im
    } else {
        0.0
    };
    (r_p + kappa * p_bright + interference).max(0.0)
}

/// Trace plus the underlying state trajectory at the bin centers.
#[derive(Debug, Clone)]
pub struct SimulatedTrace {
    pub trace: PhotonTrace,
    /// Initial time followed by the bin centers.
    pub times: Vec<f64>,
    pub states: Vec<SuperatomState>,
    pub stats: StepStats,
    pub diagnostics: Diagnostics,
}

impl SimulatedTrace {
    /// Bright-state population at each bin center.
    pub fn bright_population(&self) -> Vec<f64> {
        self.states[1..].iter().map(|s| s.population(Level::W)).collect()
    }
}

/// Propagation grid for a set of bins: an initial time no later than the
/// pulse start followed by the bin centers.
pub(crate) fn center_grid(shape: &PulseShape, bin_edges: &[f64]) -> Result<(f64, Vec<f64>)> {
    if bin_edges.len() < 2 {
        return Err(Error::InvalidGrid("need at least one bin".into()));
    }
    if bin_edges.windows(2).any(|w| !(w[1] > w[0])) {
        return Err(Error::InvalidGrid("bin edges must be strictly increasing".into()));
    }
    let t0 = bin_edges[0].min(shape.start_time());
    let mut grid = Vec::with_capacity(bin_edges.len());
    grid.push(t0);
    grid.extend(bin_edges.windows(2).map(|w| 0.5 * (w[0] + w[1])));
    Ok((t0, grid))
}

/// Propagate from |G⟩⟨G| and evaluate the forward rate at each bin center.
pub fn simulate_trace(
    eff: &EffectiveParams,
    shape: &PulseShape,
    bin_edges: &[f64],
    opts: &PropagateOptions,
) -> Result<SimulatedTrace> {
    let sys = build_system(eff, shape)?;
    let (_, grid) = center_grid(shape, bin_edges)?;
    let p = propagate(&sys, SuperatomState::ground().density(), &grid, opts)?;
    let states: Vec<SuperatomState> = p.states.into_iter().map(SuperatomState).collect();
    let rates = grid[1..]
        .iter()
        .zip(&states[1..])
        .map(|(&t, s)| forward_rate(s, eff, shape.rate(t)))
        .collect();
    Ok(SimulatedTrace {
        trace: PhotonTrace::from_rates(bin_edges.to_vec(), rates)?,
        times: grid,
        states,
        stats: p.stats,
        diagnostics: p.diagnostics,
    })
}

/// Four-level model as a [`TraceSimulator`]: the pulse supplies the probe
/// rate, `eff.r_p` is ignored.
#[derive(Debug, Clone, Copy)]
pub struct FourLevelModel {
    pub eff: EffectiveParams,
    pub options: PropagateOptions,
}

impl FourLevelModel {
    pub fn new(eff: EffectiveParams) -> Self {
        FourLevelModel {
            eff,
            options: PropagateOptions::default(),
        }
    }

    pub fn with_options(mut self, options: PropagateOptions) -> Self {
        self.options = options;
        self
    }
}

impl TraceSimulator for FourLevelModel {
    fn simulate(&self, shape: &PulseShape, bin_edges: &[f64]) -> Result<PhotonTrace> {
        let eff = self.eff.with_r_p(shape.peak_rate);
        Ok(simulate_trace(&eff, shape, bin_edges, &self.options)?.trace)
    }

    fn rabi_frequency(&self, peak_rate: f64) -> Option<f64> {
        Some(collective_rabi(&self.eff.with_r_p(peak_rate)))
    }
}

//! Microscopic model: N two-level emitters coupled to a chiral waveguide,
//! restricted to the ground state plus the single-excitation sector
//! (optionally with a dark reservoir state).
//!
//! Basis: index 0 is |G⟩, index 1 + l is atom l excited, and index N + 1
//! is |D⟩ when dephasing is enabled.

mod exchange;
mod thermal;

pub use exchange::{
    build_exchange_eigenmode, build_exchange_position, mode_coupling, mode_energy,
    propagation_ranks, Eigenmodes,
};
pub use thermal::ThermalMotion;

use num_complex::Complex64 as C64;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::lindblad::{
    propagate, propagate_with, CMatrix, DensityMatrix, Diagnostics, Liouvillian, PropagateOptions,
    Propagation,
};
use crate::ode::{Dopri5, OdeSystem, StepStats, Tolerances};
use crate::pulse::PulseShape;
use crate::superatom::{center_grid, emission_rate};
use crate::trace::{PhotonTrace, TraceSimulator};

/// Largest ensemble accepted by the density-matrix backend.
pub const MAX_DENSITY_ATOMS: usize = 2000;
/// Ensembles above this size use trajectories under [`Backend::Auto`].
pub const AUTO_DENSITY_LIMIT: usize = 200;

const ZERO: C64 = C64 { re: 0.0, im: 0.0 };
const ONE: C64 = C64 { re: 1.0, im: 0.0 };

fn default_k0() -> f64 {
    1.0
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct WaveguideConfig {
    /// Collective waveguide decay rate of |W⟩ (1/µs).
    pub kappa: f64,
    /// Single-atom Raman decay to |G⟩ (1/µs).
    pub gamma_raman: f64,
    /// Per-atom decay into the dark reservoir (1/µs); 0 removes |D⟩.
    #[serde(default)]
    pub gamma_d: f64,
    /// Atom positions (µm). Only their order along k₀ matters.
    pub positions: Vec<f64>,
    /// Waveguide wavenumber; its sign sets the propagation direction.
    #[serde(default = "default_k0")]
    pub k0: f64,
    /// Per-atom detunings (rad/µs); empty means none.
    #[serde(default)]
    pub detunings: Vec<f64>,
    #[serde(default)]
    pub thermal: Option<ThermalMotion>,
}

impl WaveguideConfig {
    /// Equally spaced atoms on [0, 1).
    pub fn ordered(n_atoms: usize, kappa: f64, gamma_raman: f64) -> Result<Self> {
        let positions = (0..n_atoms).map(|i| i as f64 / n_atoms.max(1) as f64).collect();
        let cfg = WaveguideConfig {
            kappa,
            gamma_raman,
            gamma_d: 0.0,
            positions,
            k0: 1.0,
            detunings: Vec::new(),
            thermal: None,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    /// Atoms uniformly distributed on [0, 1).
    pub fn random(n_atoms: usize, kappa: f64, gamma_raman: f64, seed: u64) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut cfg = Self::ordered(n_atoms, kappa, gamma_raman)?;
        cfg.positions = (0..n_atoms).map(|_| rng.random::<f64>()).collect();
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn with_gamma_d(mut self, gamma_d: f64) -> Self {
        self.gamma_d = gamma_d;
        self
    }

    pub fn n_atoms(&self) -> usize {
        self.positions.len()
    }

    pub fn has_dark_state(&self) -> bool {
        self.gamma_d > 0.0
    }

    /// Dimension of the reduced Hilbert space.
    pub fn dim(&self) -> usize {
        self.n_atoms() + 1 + usize::from(self.has_dark_state())
    }

    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("kappa", self.kappa),
            ("gamma_raman", self.gamma_raman),
            ("gamma_d", self.gamma_d),
        ] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(Error::invalid(format!("{name} must be finite and non-negative, got {v}")));
            }
        }
        propagation_ranks(&self.positions, self.k0)?;
        if !self.detunings.is_empty() && self.detunings.len() != self.n_atoms() {
            return Err(Error::DimensionMismatch {
                expected: self.n_atoms(),
                found: self.detunings.len(),
            });
        }
        if self.detunings.iter().any(|d| !d.is_finite()) {
            return Err(Error::invalid("detunings must be finite"));
        }
        if let Some(t) = &self.thermal {
            t.validate()?;
        }
        Ok(())
    }

    /// Eigenmode decomposition with basis rows in atom-label order.
    pub fn eigenmodes(&self) -> Result<Eigenmodes> {
        let rank = propagation_ranks(&self.positions, self.k0)?;
        let mut m = build_exchange_eigenmode(self.n_atoms(), self.kappa)?;
        let sorted = m.basis.clone();
        for (l, &r) in rank.iter().enumerate() {
            m.basis.set_row(l, &sorted.row(r));
        }
        Ok(m)
    }
}

/// Copy of `config` with per-atom Doppler detunings drawn from its thermal
/// block. Averaging over seeds is left to the caller.
pub fn apply_thermal_detunings(config: &WaveguideConfig, seed: u64) -> Result<WaveguideConfig> {
    let thermal = config
        .thermal
        .ok_or_else(|| Error::invalid("configuration has no thermal block"))?;
    let mut out = config.clone();
    out.detunings = thermal.sample_detunings(config.n_atoms(), seed)?;
    Ok(out)
}

/// Master-equation generator in the reduced basis, applied in O(N) per
/// state vector using the rank structure of the exchange matrix.
#[derive(Debug, Clone)]
pub struct WaveguideGenerator {
    n: usize,
    dim: usize,
    order: Vec<usize>,
    exchange: f64,
    detunings: Vec<f64>,
    kappa: f64,
    gamma_raman: f64,
    gamma_d: f64,
    dark: bool,
    sqrt_kappa: f64,
    pulse: PulseShape,
}

impl WaveguideGenerator {
    pub fn new(config: &WaveguideConfig, pulse: &PulseShape) -> Result<Self> {
        config.validate()?;
        pulse.validate()?;
        let n = config.n_atoms();
        let rank = propagation_ranks(&config.positions, config.k0)?;
        let mut order = vec![0; n];
        for (l, &r) in rank.iter().enumerate() {
            order[r] = l;
        }
        Ok(WaveguideGenerator {
            n,
            dim: config.dim(),
            order,
            exchange: config.kappa / (2.0 * n as f64),
            detunings: config.detunings.clone(),
            kappa: config.kappa,
            gamma_raman: config.gamma_raman,
            gamma_d: config.gamma_d,
            dark: config.has_dark_state(),
            sqrt_kappa: config.kappa.sqrt(),
            pulse: *pulse,
        })
    }

    /// Drive matrix element ⟨W|H|G⟩ = √κ·α(t) with α = 2√R_p(t), the
    /// same G–W coupling as the four-level model.
    pub fn drive(&self, t: f64) -> f64 {
        2.0 * self.sqrt_kappa * self.pulse.amplitude(t)
    }

    /// out = K v with K = H − (i/2) Σ_k rate_k L_k†L_k.
    fn apply_k(&self, g: f64, v: &[C64], out: &mut [C64]) {
        let n = self.n;
        let nf = n as f64;
        let inv_sqrt_n = 1.0 / nf.sqrt();
        let atoms = &v[1..=n];
        let sum: C64 = atoms.iter().sum();
        out[0] = sum * (g * inv_sqrt_n);
        let mut prefix = ZERO;
        let i_exch = C64::new(0.0, self.exchange);
        for &a in &self.order {
            let c = atoms[a];
            out[1 + a] = i_exch * (prefix * 2.0 - sum + c);
            prefix += c;
        }
        let feed = v[0] * (g * inv_sqrt_n) - C64::new(0.0, 0.5 * self.kappa / nf) * sum;
        let loss = C64::new(0.0, -0.5 * (self.gamma_raman + self.gamma_d));
        for a in 0..n {
            let mut diag = loss;
            if let Some(d) = self.detunings.get(a) {
                diag += d;
            }
            out[1 + a] += feed + diag * atoms[a];
        }
        if self.dark {
            out[n + 1] = v[n + 1] * C64::new(0.0, -0.5 * self.gamma_raman);
        }
    }

    /// Dense Hermitian Hamiltonian at time t.
    pub fn hamiltonian(&self, t: f64) -> CMatrix {
        let mut herm = self.clone();
        herm.kappa = 0.0;
        herm.gamma_raman = 0.0;
        herm.gamma_d = 0.0;
        let g = self.drive(t);
        let mut h = CMatrix::zeros(self.dim, self.dim);
        let mut e = vec![ZERO; self.dim];
        let mut col = vec![ZERO; self.dim];
        for j in 0..self.dim {
            e.iter_mut().for_each(|x| *x = ZERO);
            e[j] = ONE;
            herm.apply_k(g, &e, &mut col);
            h.set_column(j, &nalgebra::DVector::from_column_slice(&col));
        }
        h
    }
}

impl Liouvillian for WaveguideGenerator {
    fn dim(&self) -> usize {
        self.dim
    }

    fn apply(&self, t: f64, rho: &[C64], out: &mut [C64]) {
        let m = self.dim;
        let n = self.n;
        let g = self.drive(t);
        let minus_i = C64::new(0.0, -1.0);
        // X = −i K ρ, column by column
        for j in 0..m {
            let col = &rho[j * m..(j + 1) * m];
            let dst = &mut out[j * m..(j + 1) * m];
            self.apply_k(g, col, dst);
            dst.iter_mut().for_each(|x| *x *= minus_i);
        }
        // out = X + X†
        for j in 0..m {
            out[j * m + j] = C64::new(2.0 * out[j * m + j].re, 0.0);
            for i in 0..j {
                let a = out[j * m + i];
                let b = out[i * m + j];
                out[j * m + i] = a + b.conj();
                out[i * m + j] = b + a.conj();
            }
        }
        let mut p_exc = 0.0;
        let mut p_bright = 0.0;
        for j in 1..=n {
            p_exc += rho[j * m + j].re;
            let col: C64 = rho[j * m + 1..j * m + 1 + n].iter().sum();
            p_bright += col.re;
        }
        p_bright /= n as f64;
        let mut to_ground = self.kappa * p_bright + self.gamma_raman * p_exc;
        if self.dark {
            let d = n + 1;
            to_ground += self.gamma_raman * rho[d * m + d].re;
            out[d * m + d] += self.gamma_d * p_exc;
        }
        out[0] += to_ground;
    }

    fn breakpoints(&self) -> Vec<f64> {
        self.pulse.breakpoints().to_vec()
    }
}

/// Unnormalized no-jump evolution dψ/dt = −iKψ.
struct NoJump<'a>(&'a WaveguideGenerator);

impl OdeSystem for NoJump<'_> {
    fn dim(&self) -> usize {
        self.0.dim
    }

    fn eval(&self, t: f64, y: &[C64], dy: &mut [C64]) {
        self.0.apply_k(self.0.drive(t), y, dy);
        let minus_i = C64::new(0.0, -1.0);
        dy.iter_mut().for_each(|x| *x *= minus_i);
    }

    fn breakpoints(&self) -> Vec<f64> {
        self.0.pulse.breakpoints().to_vec()
    }
}

/// ⟨W|ρ|W⟩ and ⟨W|ρ|G⟩ of a reduced density matrix.
fn bright_moments(rho: &CMatrix, n: usize) -> (f64, C64) {
    let inv = 1.0 / (n as f64).sqrt();
    let mut p = ZERO;
    for j in 1..=n {
        for i in 1..=n {
            p += rho[(i, j)];
        }
    }
    let wg: C64 = (1..=n).map(|i| rho[(i, 0)]).sum::<C64>() * inv;
    (p.re / n as f64, wg)
}

/// Forward photon flux for the reduced density matrix: the same
/// input–output composition as the four-level model with |W⟩ as the
/// bright state.
pub fn waveguide_emission(rho: &DensityMatrix, config: &WaveguideConfig, r_p_now: f64) -> Result<f64> {
    if rho.dim() != config.dim() {
        return Err(Error::DimensionMismatch {
            expected: config.dim(),
            found: rho.dim(),
        });
    }
    let (p_w, wg) = bright_moments(rho.matrix(), config.n_atoms());
    Ok(emission_rate(config.kappa, r_p_now, p_w, wg))
}

/// Pure state |G⟩ in the reduced basis.
pub fn ground_state(config: &WaveguideConfig) -> DensityMatrix {
    DensityMatrix::basis(config.dim(), 0)
}

/// Symmetric excitation |W⟩ in the reduced basis.
pub fn bright_state(config: &WaveguideConfig) -> Result<DensityMatrix> {
    let n = config.n_atoms();
    let mut psi = vec![ZERO; config.dim()];
    for x in &mut psi[1..=n] {
        *x = C64::new(1.0 / (n as f64).sqrt(), 0.0);
    }
    DensityMatrix::pure(&psi)
}

fn density_guard(config: &WaveguideConfig) -> Result<()> {
    if config.n_atoms() > MAX_DENSITY_ATOMS {
        return Err(Error::invalid(format!(
            "density backend supports at most {MAX_DENSITY_ATOMS} atoms, got {}",
            config.n_atoms()
        )));
    }
    Ok(())
}

/// Full density-matrix propagation from `rho0` at `grid[0]`.
pub fn propagate_density(
    config: &WaveguideConfig,
    pulse: &PulseShape,
    rho0: &DensityMatrix,
    grid: &[f64],
    opts: &PropagateOptions,
) -> Result<Propagation> {
    density_guard(config)?;
    let gen = WaveguideGenerator::new(config, pulse)?;
    propagate(&gen, rho0, grid, opts)
}

/// Ensemble observables on a time grid.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WaveguideObservables {
    pub times: Vec<f64>,
    pub p_ground: Vec<f64>,
    pub p_bright: Vec<f64>,
    pub p_excited: Vec<f64>,
    pub p_dark: Vec<f64>,
    pub coherence_wg: Vec<C64>,
    /// Forward photon flux (photons/µs).
    pub emission: Vec<f64>,
    /// Standard errors of the trajectory means, including a resolution
    /// term of one trajectory's range; zero for the density backend.
    pub p_bright_se: Vec<f64>,
    pub p_excited_se: Vec<f64>,
    pub emission_se: Vec<f64>,
    pub n_trajectories: usize,
    pub diagnostics: Option<Diagnostics>,
    pub stats: StepStats,
}

impl WaveguideObservables {
    fn with_capacity(n: usize) -> Self {
        WaveguideObservables {
            times: Vec::with_capacity(n),
            p_ground: Vec::with_capacity(n),
            p_bright: Vec::with_capacity(n),
            p_excited: Vec::with_capacity(n),
            p_dark: Vec::with_capacity(n),
            coherence_wg: Vec::with_capacity(n),
            emission: Vec::with_capacity(n),
            p_bright_se: Vec::with_capacity(n),
            p_excited_se: Vec::with_capacity(n),
            emission_se: Vec::with_capacity(n),
            n_trajectories: 0,
            diagnostics: None,
            stats: StepStats::default(),
        }
    }
}

/// Density-matrix backend reduced to observables on `grid`, starting from
/// |G⟩ at `grid[0]`.
pub fn density_observables(
    config: &WaveguideConfig,
    pulse: &PulseShape,
    grid: &[f64],
    opts: &PropagateOptions,
) -> Result<WaveguideObservables> {
    density_guard(config)?;
    let gen = WaveguideGenerator::new(config, pulse)?;
    let n = config.n_atoms();
    let mut obs = WaveguideObservables::with_capacity(grid.len());
    let (stats, diag) = propagate_with(&gen, &ground_state(config), grid, opts, |_, t, rho| {
        let m = rho.matrix();
        let (p_w, wg) = bright_moments(m, n);
        let p_exc: f64 = (1..=n).map(|j| m[(j, j)].re).sum();
        obs.times.push(t);
        obs.p_ground.push(m[(0, 0)].re);
        obs.p_bright.push(p_w);
        obs.p_excited.push(p_exc);
        obs.p_dark.push(if config.has_dark_state() { m[(n + 1, n + 1)].re } else { 0.0 });
        obs.coherence_wg.push(wg);
        obs.emission.push(emission_rate(config.kappa, pulse.rate(t), p_w, wg));
        obs.p_bright_se.push(0.0);
        obs.p_excited_se.push(0.0);
        obs.emission_se.push(0.0);
        Ok(())
    })?;
    obs.diagnostics = Some(diag);
    obs.stats = stats;
    Ok(obs)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrajectoryOptions {
    pub n_trajectories: usize,
    pub seed: u64,
    pub rtol: f64,
    pub atol: f64,
    /// Trajectories run concurrently per batch; batches are reduced in
    /// order so results do not depend on the thread count.
    pub batch: usize,
}

impl Default for TrajectoryOptions {
    fn default() -> Self {
        TrajectoryOptions {
            n_trajectories: 1000,
            seed: 0,
            rtol: 1e-8,
            atol: 1e-12,
            batch: 64,
        }
    }
}

// per-grid-point samples: p_g, p_w, p_exc, p_d, Re ρ_WG, Im ρ_WG, raw flux
const N_OBS: usize = 7;

fn sample(gen: &WaveguideGenerator, psi: &[C64], r_p: f64) -> [f64; N_OBS] {
    let n = gen.n;
    let nrm: f64 = psi.iter().map(|c| c.norm_sqr()).sum();
    let amp_w: C64 = psi[1..=n].iter().sum::<C64>() / (n as f64).sqrt();
    let p_g = psi[0].norm_sqr() / nrm;
    let p_w = amp_w.norm_sqr() / nrm;
    let p_exc = psi[1..=n].iter().map(|c| c.norm_sqr()).sum::<f64>() / nrm;
    let p_d = if gen.dark { psi[n + 1].norm_sqr() / nrm } else { 0.0 };
    let wg = amp_w * psi[0].conj() / nrm;
    let raw = r_p + gen.kappa * p_w + 2.0 * (gen.kappa * r_p).sqrt() * wg.im;
    [p_g, p_w, p_exc, p_d, wg.re, wg.im, raw]
}

fn run_trajectory(
    gen: &WaveguideGenerator,
    grid: &[f64],
    tol: Tolerances,
    rng: &mut ChaCha8Rng,
) -> Result<(Vec<[f64; N_OBS]>, StepStats)> {
    let m = gen.dim;
    let n = gen.n;
    let sys = NoJump(gen);
    let mut psi = vec![ZERO; m];
    psi[0] = ONE;
    let ground_sample = sample(gen, &psi, 0.0);
    let mut out = Vec::with_capacity(grid.len());
    let mut solver = Dopri5::new(&sys, grid[0], &psi, tol)?;
    out.push(sample(gen, &psi, gen.pulse.rate(grid[0])));
    let t_end = *grid.last().unwrap();
    let drive_off = if gen.pulse.is_empty() { f64::NEG_INFINITY } else { gen.pulse.end_time };
    let mut buf = vec![ZERO; m];
    let mut in_ground = true;
    let mut threshold: f64 = rng.random();
    let norm2 = |v: &[C64]| v.iter().map(|c| c.norm_sqr()).sum::<f64>();
    while out.len() < grid.len() {
        if in_ground && solver.t() >= drive_off {
            while out.len() < grid.len() {
                let mut s = ground_sample;
                s[6] = gen.pulse.rate(grid[out.len()]);
                out.push(s);
            }
            break;
        }
        solver.step(t_end)?;
        in_ground = false;
        if norm2(solver.y()) > threshold {
            while out.len() < grid.len() && grid[out.len()] <= solver.t() {
                let t = grid[out.len()];
                solver.interpolate(t, &mut buf);
                out.push(sample(gen, &buf, gen.pulse.rate(t)));
            }
            continue;
        }
        let (mut lo, mut hi) = (solver.t_previous(), solver.t());
        for _ in 0..200 {
            if hi - lo <= 1e-13 * hi.abs().max(1.0) {
                break;
            }
            let mid = 0.5 * (lo + hi);
            solver.interpolate(mid, &mut buf);
            if norm2(&buf) > threshold {
                lo = mid;
            } else {
                hi = mid;
            }
        }
        let t_jump = hi;
        while out.len() < grid.len() && grid[out.len()] < t_jump {
            let t = grid[out.len()];
            solver.interpolate(t, &mut buf);
            out.push(sample(gen, &buf, gen.pulse.rate(t)));
        }
        solver.interpolate(t_jump, &mut buf);
        let p_exc: f64 = buf[1..=n].iter().map(|c| c.norm_sqr()).sum();
        let amp_w: C64 = buf[1..=n].iter().sum::<C64>() / (n as f64).sqrt();
        let weights = [
            gen.kappa * amp_w.norm_sqr() + gen.gamma_raman * p_exc,
            gen.gamma_d * p_exc,
            if gen.dark { gen.gamma_raman * buf[n + 1].norm_sqr() } else { 0.0 },
        ];
        let total: f64 = weights.iter().sum();
        let u = rng.random::<f64>() * total;
        psi.iter_mut().for_each(|x| *x = ZERO);
        let to_dark = total > 0.0 && u >= weights[0] && u < weights[0] + weights[1];
        if to_dark {
            psi[n + 1] = ONE;
        } else {
            psi[0] = ONE;
        }
        in_ground = !to_dark;
        solver.reset(t_jump, &psi);
        threshold = rng.random();
    }
    Ok((out, solver.stats()))
}

/// Monte Carlo wavefunction average from |G⟩ at `grid[0]`. Every
/// trajectory owns a ChaCha stream derived from `seed` and its index.
pub fn propagate_trajectories(
    config: &WaveguideConfig,
    pulse: &PulseShape,
    grid: &[f64],
    opts: &TrajectoryOptions,
) -> Result<WaveguideObservables> {
    if opts.n_trajectories == 0 {
        return Err(Error::invalid("need at least one trajectory"));
    }
    if grid.is_empty() || grid.windows(2).any(|w| !(w[1] > w[0])) {
        return Err(Error::InvalidGrid("grid must be non-empty and strictly increasing".into()));
    }
    let gen = WaveguideGenerator::new(config, pulse)?;
    let tol = Tolerances {
        rtol: opts.rtol,
        atol: opts.atol,
        ..Tolerances::default()
    };
    let len = grid.len();
    let mut sum = vec![[0.0; N_OBS]; len];
    let mut sum_sq = vec![[0.0; N_OBS]; len];
    let mut stats = StepStats::default();
    let batch = opts.batch.max(1);
    let mut start = 0;
    while start < opts.n_trajectories {
        let stop = (start + batch).min(opts.n_trajectories);
        let runs: Vec<Result<(Vec<[f64; N_OBS]>, StepStats)>> = (start..stop)
            .into_par_iter()
            .map(|k| {
                let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
                rng.set_stream(k as u64);
                run_trajectory(&gen, grid, tol, &mut rng)
            })
            .collect();
        for run in runs {
            let (samples, st) = run?;
            for (i, s) in samples.iter().enumerate() {
                for q in 0..N_OBS {
                    sum[i][q] += s[q];
                    sum_sq[i][q] += s[q] * s[q];
                }
            }
            stats.accepted += st.accepted;
            stats.rejected += st.rejected;
            stats.evaluations += st.evaluations;
            stats.error_estimate += st.error_estimate;
        }
        start = stop;
    }
    let nt = opts.n_trajectories as f64;
    // Sample standard error combined in quadrature with the resolution of
    // n trajectories (one trajectory's worth of the observable's range),
    // which covers events too rare to appear in the sample.
    let se = |i: usize, q: usize, range: f64| {
        let mean = sum[i][q] / nt;
        let var = if opts.n_trajectories < 2 {
            0.0
        } else {
            ((sum_sq[i][q] - nt * mean * mean) / (nt - 1.0)).max(0.0)
        };
        (var / nt + (range / nt).powi(2)).sqrt()
    };
    let mut obs = WaveguideObservables::with_capacity(len);
    for i in 0..len {
        let mean = |q: usize| sum[i][q] / nt;
        obs.times.push(grid[i]);
        obs.p_ground.push(mean(0));
        obs.p_bright.push(mean(1));
        obs.p_excited.push(mean(2));
        obs.p_dark.push(mean(3));
        obs.coherence_wg.push(C64::new(mean(4), mean(5)));
        obs.emission.push(mean(6).max(0.0));
        let r_p = pulse.rate(grid[i]);
        let flux_range = r_p + config.kappa + 2.0 * (config.kappa * r_p).sqrt();
        obs.p_bright_se.push(se(i, 1, 1.0));
        obs.p_excited_se.push(se(i, 2, 1.0));
        obs.emission_se.push(se(i, 6, flux_range));
    }
    obs.n_trajectories = opts.n_trajectories;
    obs.stats = stats;
    Ok(obs)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Backend {
    /// Density matrix up to [`AUTO_DENSITY_LIMIT`] atoms, trajectories above.
    Auto,
    Density,
    Trajectories,
}

impl Backend {
    pub fn resolve(self, n_atoms: usize) -> Backend {
        match self {
            Backend::Auto if n_atoms <= AUTO_DENSITY_LIMIT => Backend::Density,
            Backend::Auto => Backend::Trajectories,
            b => b,
        }
    }
}

/// Waveguide model as a [`TraceSimulator`].
#[derive(Debug, Clone)]
pub struct WaveguideModel {
    pub config: WaveguideConfig,
    pub backend: Backend,
    pub density: PropagateOptions,
    pub trajectories: TrajectoryOptions,
}

impl WaveguideModel {
    pub fn new(config: WaveguideConfig) -> Self {
        WaveguideModel {
            config,
            backend: Backend::Auto,
            density: PropagateOptions::default().with_rtol(1e-9).with_atol(1e-12),
            trajectories: TrajectoryOptions::default(),
        }
    }

    pub fn with_backend(mut self, backend: Backend) -> Self {
        self.backend = backend;
        self
    }

    pub fn with_trajectories(mut self, opts: TrajectoryOptions) -> Self {
        self.trajectories = opts;
        self
    }

    pub fn with_density_options(mut self, opts: PropagateOptions) -> Self {
        self.density = opts;
        self
    }

    /// Observables at the initial time followed by the bin centers.
    pub fn observables(&self, pulse: &PulseShape, bin_edges: &[f64]) -> Result<WaveguideObservables> {
        let (_, grid) = center_grid(pulse, bin_edges)?;
        match self.backend.resolve(self.config.n_atoms()) {
            Backend::Density => density_observables(&self.config, pulse, &grid, &self.density),
            _ => propagate_trajectories(&self.config, pulse, &grid, &self.trajectories),
        }
    }
}

impl TraceSimulator for WaveguideModel {
    fn simulate(&self, pulse: &PulseShape, bin_edges: &[f64]) -> Result<PhotonTrace> {
        let obs = self.observables(pulse, bin_edges)?;
        PhotonTrace::from_rates(bin_edges.to_vec(), obs.emission[1..].to_vec())
    }

    fn rabi_frequency(&self, peak_rate: f64) -> Option<f64> {
        Some(2.0 * (self.config.kappa * peak_rate).sqrt())
    }
}

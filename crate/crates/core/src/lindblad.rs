//! Time-dependent Lindblad master equations on dense Hilbert spaces.
//!
//! dρ/dt = −i[H(t), ρ] + Σ_k γ_k (L_k ρ L_k† − ½{L_k† L_k, ρ})
//!
//! Density matrices are stored column-major, as `nalgebra` does.

use std::sync::Arc;

use nalgebra::DMatrix;
use num_complex::Complex64 as C64;

use crate::error::{Error, Result};
use crate::ode::{integrate_grid, OdeSystem, StepStats, Tolerances};

pub type CMatrix = DMatrix<C64>;

const ZERO: C64 = C64 { re: 0.0, im: 0.0 };
const I: C64 = C64 { re: 0.0, im: 1.0 };

/// Largest entry of |A − A†|.
pub fn hermiticity_error(m: &CMatrix) -> f64 {
    let n = m.nrows();
    let mut worst = 0.0f64;
    for c in 0..n {
        for r in 0..=c {
            worst = worst.max((m[(r, c)] - m[(c, r)].conj()).norm());
        }
    }
    worst
}

/// Smallest eigenvalue of a Hermitian matrix.
pub fn min_eigenvalue(m: &CMatrix) -> f64 {
    if m.nrows() == 0 {
        return 0.0;
    }
    let sym = (m + m.adjoint()) * C64::new(0.5, 0.0);
    sym.symmetric_eigenvalues().min()
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct InvariantTolerances {
    pub hermiticity: f64,
    pub trace: f64,
    pub positivity: f64,
}

impl Default for InvariantTolerances {
    fn default() -> Self {
        InvariantTolerances {
            hermiticity: 1e-10,
            trace: 1e-8,
            positivity: 1e-8,
        }
    }
}

/// Worst invariant values seen over a set of states.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct Diagnostics {
    pub max_trace_error: f64,
    pub max_hermiticity_error: f64,
    /// `f64::INFINITY` when positivity was never checked.
    pub min_eigenvalue: f64,
}

impl Default for Diagnostics {
    fn default() -> Self {
        Diagnostics {
            max_trace_error: 0.0,
            max_hermiticity_error: 0.0,
            min_eigenvalue: f64::INFINITY,
        }
    }
}

impl Diagnostics {
    pub fn merge(&mut self, other: &Diagnostics) {
        self.max_trace_error = self.max_trace_error.max(other.max_trace_error);
        self.max_hermiticity_error = self.max_hermiticity_error.max(other.max_hermiticity_error);
        self.min_eigenvalue = self.min_eigenvalue.min(other.min_eigenvalue);
    }

    pub fn within(&self, tol: &InvariantTolerances) -> bool {
        self.max_trace_error <= tol.trace
            && self.max_hermiticity_error <= tol.hermiticity
            && self.min_eigenvalue >= -tol.positivity
    }
}

/// Hermitian, unit-trace, positive semidefinite matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct DensityMatrix(CMatrix);

impl DensityMatrix {
    pub fn from_matrix(m: CMatrix) -> Result<Self> {
        if m.nrows() != m.ncols() {
            return Err(Error::DimensionMismatch {
                expected: m.nrows(),
                found: m.ncols(),
            });
        }
        let rho = DensityMatrix(m);
        rho.check(0.0, &InvariantTolerances::default(), true)?;
        Ok(rho)
    }

    /// Wrap without validation; for intermediate solver states.
    pub fn from_matrix_unchecked(m: CMatrix) -> Self {
        DensityMatrix(m)
    }

    /// |k⟩⟨k| in a `dim`-dimensional space.
    pub fn basis(dim: usize, k: usize) -> Self {
        let mut m = CMatrix::zeros(dim, dim);
        m[(k, k)] = C64::new(1.0, 0.0);
        DensityMatrix(m)
    }

    /// |ψ⟩⟨ψ|/⟨ψ|ψ⟩.
    pub fn pure(psi: &[C64]) -> Result<Self> {
        let norm: f64 = psi.iter().map(|c| c.norm_sqr()).sum();
        if !(norm > 0.0) {
            return Err(Error::invalid("zero state vector"));
        }
        let n = psi.len();
        let m = CMatrix::from_fn(n, n, |r, c| psi[r] * psi[c].conj() / norm);
        Ok(DensityMatrix(m))
    }

    pub fn dim(&self) -> usize {
        self.0.nrows()
    }

    pub fn matrix(&self) -> &CMatrix {
        &self.0
    }

    pub fn into_inner(self) -> CMatrix {
        self.0
    }

    pub fn entry(&self, r: usize, c: usize) -> C64 {
        self.0[(r, c)]
    }

    pub fn population(&self, k: usize) -> f64 {
        self.0[(k, k)].re
    }

    pub fn trace(&self) -> C64 {
        self.0.trace()
    }

    pub fn diagnostics(&self, with_positivity: bool) -> Diagnostics {
        Diagnostics {
            max_trace_error: (self.trace() - C64::new(1.0, 0.0)).norm(),
            max_hermiticity_error: hermiticity_error(&self.0),
            min_eigenvalue: if with_positivity {
                min_eigenvalue(&self.0)
            } else {
                f64::INFINITY
            },
        }
    }

    /// Check the density-matrix invariants, reporting the first violation.
    pub fn check(&self, t: f64, tol: &InvariantTolerances, with_positivity: bool) -> Result<Diagnostics> {
        let d = self.diagnostics(with_positivity);
        if d.max_trace_error > tol.trace {
            return Err(Error::InvariantViolation {
                t,
                kind: "trace preservation",
                value: d.max_trace_error,
                tolerance: tol.trace,
            });
        }
        if d.max_hermiticity_error > tol.hermiticity {
            return Err(Error::InvariantViolation {
                t,
                kind: "hermiticity",
                value: d.max_hermiticity_error,
                tolerance: tol.hermiticity,
            });
        }
        if d.min_eigenvalue < -tol.positivity {
            return Err(Error::InvariantViolation {
                t,
                kind: "positivity",
                value: -d.min_eigenvalue,
                tolerance: tol.positivity,
            });
        }
        Ok(d)
    }
}

/// Nonzero entries of a matrix as (row, column, value).
#[derive(Debug, Clone, PartialEq, Default)]
pub struct SparseEntries(pub Vec<(usize, usize, C64)>);

impl SparseEntries {
    pub fn from_dense(m: &CMatrix) -> Self {
        let mut v = Vec::new();
        for c in 0..m.ncols() {
            for r in 0..m.nrows() {
                let x = m[(r, c)];
                if x != ZERO {
                    v.push((r, c, x));
                }
            }
        }
        SparseEntries(v)
    }
}

pub type Coefficient = Arc<dyn Fn(f64) -> f64 + Send + Sync>;

/// `coefficient(t) · matrix` with a static Hermitian matrix.
#[derive(Clone)]
pub struct HamiltonianTerm {
    coefficient: Coefficient,
    matrix: CMatrix,
    sparse: SparseEntries,
}

impl HamiltonianTerm {
    pub fn new(coefficient: Coefficient, matrix: CMatrix) -> Self {
        let sparse = SparseEntries::from_dense(&matrix);
        HamiltonianTerm {
            coefficient,
            matrix,
            sparse,
        }
    }

    pub fn constant(matrix: CMatrix) -> Self {
        Self::new(Arc::new(|_| 1.0), matrix)
    }

    pub fn matrix(&self) -> &CMatrix {
        &self.matrix
    }

    pub fn coefficient(&self, t: f64) -> f64 {
        (self.coefficient)(t)
    }
}

impl std::fmt::Debug for HamiltonianTerm {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("HamiltonianTerm").field("matrix", &self.matrix).finish()
    }
}

/// Jump operator L with a non-negative rate γ.
#[derive(Debug, Clone)]
pub struct JumpOperator {
    rate: f64,
    op: CMatrix,
    sparse: SparseEntries,
    ldl: SparseEntries,
}

impl JumpOperator {
    pub fn new(rate: f64, op: CMatrix) -> Result<Self> {
        if !(rate >= 0.0) || !rate.is_finite() {
            return Err(Error::invalid(format!("jump rate {rate} must be finite and >= 0")));
        }
        if op.nrows() != op.ncols() {
            return Err(Error::DimensionMismatch {
                expected: op.nrows(),
                found: op.ncols(),
            });
        }
        let sparse = SparseEntries::from_dense(&op);
        let ldl = SparseEntries::from_dense(&(op.adjoint() * &op));
        Ok(JumpOperator { rate, op, sparse, ldl })
    }

    /// Transition operator |to⟩⟨from|.
    pub fn transition(rate: f64, dim: usize, to: usize, from: usize) -> Result<Self> {
        let mut m = CMatrix::zeros(dim, dim);
        m[(to, from)] = C64::new(1.0, 0.0);
        Self::new(rate, m)
    }

    pub fn rate(&self) -> f64 {
        self.rate
    }

    pub fn operator(&self) -> &CMatrix {
        &self.op
    }
}

/// Generator of a Markovian master equation acting on column-major ρ.
pub trait Liouvillian: Sync {
    fn dim(&self) -> usize;
    /// Write dρ/dt at time `t` into `out` (overwritten).
    fn apply(&self, t: f64, rho: &[C64], out: &mut [C64]);
    fn breakpoints(&self) -> Vec<f64> {
        Vec::new()
    }
}

/// Generic Lindblad system: H(t) = Σ_k f_k(t) H_k plus weighted jumps.
#[derive(Debug, Clone)]
pub struct LindbladSystem {
    dim: usize,
    terms: Vec<HamiltonianTerm>,
    jumps: Vec<JumpOperator>,
    breakpoints: Vec<f64>,
}

impl LindbladSystem {
    pub fn new(dim: usize) -> Self {
        LindbladSystem {
            dim,
            terms: Vec::new(),
            jumps: Vec::new(),
            breakpoints: Vec::new(),
        }
    }

    pub fn with_term(mut self, term: HamiltonianTerm) -> Result<Self> {
        let m = term.matrix();
        if m.nrows() != self.dim || m.ncols() != self.dim {
            return Err(Error::DimensionMismatch {
                expected: self.dim,
                found: m.nrows(),
            });
        }
        let herr = hermiticity_error(m);
        if herr > 1e-12 {
            return Err(Error::invalid(format!("Hamiltonian term not Hermitian ({herr:e})")));
        }
        self.terms.push(term);
        Ok(self)
    }

    pub fn with_jump(mut self, jump: JumpOperator) -> Result<Self> {
        if jump.op.nrows() != self.dim {
            return Err(Error::DimensionMismatch {
                expected: self.dim,
                found: jump.op.nrows(),
            });
        }
        self.jumps.push(jump);
        Ok(self)
    }

    pub fn with_breakpoints(mut self, pts: impl IntoIterator<Item = f64>) -> Self {
        self.breakpoints.extend(pts);
        self.breakpoints.sort_by(|a, b| a.partial_cmp(b).unwrap());
        self.breakpoints.dedup();
        self
    }

    pub fn terms(&self) -> &[HamiltonianTerm] {
        &self.terms
    }

    pub fn jumps(&self) -> &[JumpOperator] {
        &self.jumps
    }

    pub fn hamiltonian(&self, t: f64) -> CMatrix {
        let mut h = CMatrix::zeros(self.dim, self.dim);
        for term in &self.terms {
            let c = term.coefficient(t);
            if c != 0.0 {
                h += term.matrix() * C64::new(c, 0.0);
            }
        }
        h
    }
}

impl Liouvillian for LindbladSystem {
    fn dim(&self) -> usize {
        self.dim
    }

    fn apply(&self, t: f64, rho: &[C64], out: &mut [C64]) {
        let n = self.dim;
        out.iter_mut().for_each(|x| *x = ZERO);
        let at = |r: usize, c: usize| r + c * n;
        // −i[H, ρ]
        for term in &self.terms {
            let coeff = term.coefficient(t);
            if coeff == 0.0 {
                continue;
            }
            for &(a, i, h) in &term.sparse.0 {
                let hc = h * coeff;
                let m_left = -I * hc; // −i H ρ
                for b in 0..n {
                    out[at(a, b)] += m_left * rho[at(i, b)];
                }
                // + i ρ H: entry (a, i) of H contributes to column i of ρH
                let m_right = I * hc;
                for r in 0..n {
                    out[at(r, i)] += m_right * rho[at(r, a)];
                }
            }
        }
        for jump in &self.jumps {
            if jump.rate == 0.0 {
                continue;
            }
            let g = jump.rate;
            // L ρ L†
            for &(a, i, l1) in &jump.sparse.0 {
                for &(b, j, l2) in &jump.sparse.0 {
                    out[at(a, b)] += l1 * l2.conj() * rho[at(i, j)] * g;
                }
            }
            // −½{L†L, ρ}
            for &(a, i, m) in &jump.ldl.0 {
                let f = m * (-0.5 * g);
                for b in 0..n {
                    out[at(a, b)] += f * rho[at(i, b)];
                }
                for r in 0..n {
                    out[at(r, i)] += f * rho[at(r, a)];
                }
            }
        }
    }

    fn breakpoints(&self) -> Vec<f64> {
        self.breakpoints.clone()
    }
}

/// dρ/dt for the given system at time `t`.
pub fn rhs<L: Liouvillian + ?Sized>(sys: &L, rho: &DensityMatrix, t: f64) -> Result<CMatrix> {
    let n = sys.dim();
    if rho.dim() != n {
        return Err(Error::DimensionMismatch {
            expected: n,
            found: rho.dim(),
        });
    }
    let mut out = CMatrix::zeros(n, n);
    sys.apply(t, rho.matrix().as_slice(), out.as_mut_slice());
    Ok(out)
}

struct Vectorized<'a, L: ?Sized>(&'a L);

impl<L: Liouvillian + ?Sized> OdeSystem for Vectorized<'_, L> {
    fn dim(&self) -> usize {
        let n = self.0.dim();
        n * n
    }
    fn eval(&self, t: f64, y: &[C64], dy: &mut [C64]) {
        self.0.apply(t, y, dy)
    }
    fn breakpoints(&self) -> Vec<f64> {
        self.0.breakpoints()
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PropagateOptions {
    pub tolerances: Tolerances,
    pub invariants: InvariantTolerances,
    /// Check the smallest eigenvalue every `positivity_stride` grid points;
    /// 0 disables the check.
    pub positivity_stride: usize,
}

impl Default for PropagateOptions {
    fn default() -> Self {
        PropagateOptions {
            tolerances: Tolerances::default(),
            invariants: InvariantTolerances::default(),
            positivity_stride: 1,
        }
    }
}

impl PropagateOptions {
    pub fn with_rtol(mut self, rtol: f64) -> Self {
        self.tolerances.rtol = rtol;
        self
    }

    pub fn with_atol(mut self, atol: f64) -> Self {
        self.tolerances.atol = atol;
        self
    }
}

#[derive(Debug, Clone)]
pub struct Propagation {
    pub times: Vec<f64>,
    pub states: Vec<DensityMatrix>,
    pub stats: StepStats,
    pub diagnostics: Diagnostics,
}

/// Propagate `rho0` from `grid[0]` and return the state at every grid time.
pub fn propagate<L: Liouvillian + ?Sized>(
    sys: &L,
    rho0: &DensityMatrix,
    grid: &[f64],
    opts: &PropagateOptions,
) -> Result<Propagation> {
    let mut states = Vec::with_capacity(grid.len());
    let (stats, diagnostics) = propagate_with(sys, rho0, grid, opts, |_, _, rho| {
        states.push(rho.clone());
        Ok(())
    })?;
    Ok(Propagation {
        times: grid.to_vec(),
        states,
        stats,
        diagnostics,
    })
}

/// Streaming form of [`propagate`]: hands each grid state to `observe`
/// instead of storing the trajectory.
pub fn propagate_with<L, F>(
    sys: &L,
    rho0: &DensityMatrix,
    grid: &[f64],
    opts: &PropagateOptions,
    mut observe: F,
) -> Result<(StepStats, Diagnostics)>
where
    L: Liouvillian + ?Sized,
    F: FnMut(usize, f64, &DensityMatrix) -> Result<()>,
{
    let n = sys.dim();
    if rho0.dim() != n {
        return Err(Error::DimensionMismatch {
            expected: n,
            found: rho0.dim(),
        });
    }
    let mut diag = Diagnostics::default();
    let stride = opts.positivity_stride;
    let stats = integrate_grid(
        &Vectorized(sys),
        rho0.matrix().as_slice(),
        grid,
        opts.tolerances,
        |idx, t, y| {
            let rho = DensityMatrix(CMatrix::from_column_slice(n, n, y));
            let with_pos = stride > 0 && (idx % stride == 0 || idx + 1 == grid.len());
            let d = rho.check(t, &opts.invariants, with_pos)?;
            diag.merge(&d);
            observe(idx, t, &rho)
        },
    )?;
    Ok((stats, diag))
}

/// True when the largest entrywise change of ρ over the last `window`
/// states is below `tol`.
pub fn steady_state_reached(states: &[DensityMatrix], window: usize, tol: f64) -> Result<bool> {
    if window > states.len() {
        return Err(Error::InsufficientData {
            needed: window,
            found: states.len(),
        });
    }
    if window < 2 {
        return Err(Error::invalid("steady-state window needs at least two states"));
    }
    let tail = &states[states.len() - window..];
    let last = tail.last().unwrap().matrix();
    let mut worst = 0.0f64;
    for s in tail {
        for (a, b) in s.matrix().iter().zip(last.iter()) {
            worst = worst.max((a - b).norm());
        }
    }
    Ok(worst < tol)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    fn c(re: f64) -> C64 {
        C64::new(re, 0.0)
    }

    fn amplitude_damping(kappa: f64) -> LindbladSystem {
        // basis: 0 = g, 1 = e
        LindbladSystem::new(2)
            .with_jump(JumpOperator::transition(kappa, 2, 0, 1).unwrap())
            .unwrap()
    }

    #[test]
    fn zero_generator_gives_zero() {
        let sys = LindbladSystem::new(3);
        let rho = DensityMatrix::pure(&[c(1.0), C64::new(0.3, 0.2), c(-0.5)]).unwrap();
        let d = rhs(&sys, &rho, 0.0).unwrap();
        assert!(d.iter().all(|x| *x == ZERO));
    }

    #[test]
    fn amplitude_damping_rhs() {
        let sys = amplitude_damping(0.46);
        let d = rhs(&sys, &DensityMatrix::basis(2, 1), 0.0).unwrap();
        assert_relative_eq!(d[(1, 1)].re, -0.46);
        assert_relative_eq!(d[(0, 0)].re, 0.46);
        assert_eq!(d[(0, 1)], ZERO);
    }

    #[test]
    fn dimension_mismatch() {
        let sys = amplitude_damping(1.0);
        assert!(matches!(
            rhs(&sys, &DensityMatrix::basis(3, 0), 0.0),
            Err(Error::DimensionMismatch { .. })
        ));
    }

    #[test]
    fn negative_rate_rejected() {
        assert!(JumpOperator::transition(-0.1, 2, 0, 1).is_err());
    }

    #[test]
    fn non_hermitian_term_rejected() {
        let mut m = CMatrix::zeros(2, 2);
        m[(0, 1)] = c(1.0);
        assert!(LindbladSystem::new(2).with_term(HamiltonianTerm::constant(m)).is_err());
    }

    #[test]
    fn amplitude_damping_propagation() {
        let kappa = 0.46;
        let sys = amplitude_damping(kappa);
        let grid: Vec<f64> = (0..=100).map(|i| i as f64 * 0.1).collect();
        let p = propagate(&sys, &DensityMatrix::basis(2, 1), &grid, &PropagateOptions::default()).unwrap();
        for (t, s) in p.times.iter().zip(&p.states) {
            assert!((s.population(1) - (-kappa * t).exp()).abs() < 1e-6);
        }
        assert!(p.diagnostics.max_trace_error <= 1e-8);
    }

    #[test]
    fn constant_without_generator() {
        let sys = LindbladSystem::new(2);
        let rho = DensityMatrix::pure(&[c(0.6), C64::new(0.0, 0.8)]).unwrap();
        let p = propagate(&sys, &rho, &[0.0, 1.0, 5.0], &PropagateOptions::default()).unwrap();
        for s in &p.states {
            assert_eq!(s, &rho);
        }
    }

    #[test]
    fn steady_state_detection() {
        let rho = DensityMatrix::basis(2, 0);
        assert!(steady_state_reached(&vec![rho.clone(); 5], 3, 1e-12).unwrap());
        assert!(steady_state_reached(&vec![rho; 2], 3, 1e-12).is_err());

        // undamped Rabi oscillation
        let mut x = CMatrix::zeros(2, 2);
        x[(0, 1)] = c(1.0);
        x[(1, 0)] = c(1.0);
        let sys = LindbladSystem::new(2).with_term(HamiltonianTerm::constant(x)).unwrap();
        let grid: Vec<f64> = (0..=50).map(|i| i as f64 * 0.1).collect();
        let p = propagate(&sys, &DensityMatrix::basis(2, 0), &grid, &PropagateOptions::default()).unwrap();
        assert!(!steady_state_reached(&p.states, 20, 0.1).unwrap());
    }
}

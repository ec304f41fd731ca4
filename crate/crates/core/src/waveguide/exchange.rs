//! Photon-exchange Hamiltonian of N emitters on a chiral waveguide.

use std::f64::consts::PI;

use nalgebra::DMatrix;
use num_complex::Complex64 as C64;

use crate::error::{Error, Result};
use crate::lindblad::CMatrix;

/// Rank of each atom along the propagation direction: `rank[l] < rank[j]`
/// when light reaches atom l before atom j.
pub fn propagation_ranks(positions: &[f64], k0: f64) -> Result<Vec<usize>> {
    if positions.is_empty() {
        return Err(Error::invalid("need at least one atom"));
    }
    if positions.iter().any(|x| !x.is_finite()) {
        return Err(Error::invalid("atom positions must be finite"));
    }
    if !(k0 != 0.0 && k0.is_finite()) {
        return Err(Error::invalid("k0 must be finite and nonzero"));
    }
    let mut order: Vec<usize> = (0..positions.len()).collect();
    order.sort_by(|&a, &b| (k0 * positions[a]).partial_cmp(&(k0 * positions[b])).unwrap());
    if order.windows(2).any(|w| positions[w[0]] == positions[w[1]]) {
        return Err(Error::invalid("atom positions must be distinct"));
    }
    let mut rank = vec![0; positions.len()];
    for (r, &a) in order.iter().enumerate() {
        rank[a] = r;
    }
    Ok(rank)
}

/// Dense excited-sector block H[l,j] = (κ/2N)·i·sign(k₀(x_l − x_j)).
pub fn build_exchange_position(positions: &[f64], k0: f64, kappa: f64) -> Result<CMatrix> {
    let rank = propagation_ranks(positions, k0)?;
    let n = positions.len();
    let c = kappa / (2.0 * n as f64);
    Ok(DMatrix::from_fn(n, n, |l, j| {
        let s = (rank[l] as f64 - rank[j] as f64).signum();
        if l == j {
            C64::new(0.0, 0.0)
        } else {
            C64::new(0.0, c * s)
        }
    }))
}

/// Bright/subradiant decomposition of the exchange Hamiltonian.
#[derive(Debug, Clone)]
pub struct Eigenmodes {
    /// ⟨W|H|C_j⟩ = κ[i + cot(πj/N)]/2N, j = 1..N−1.
    pub couplings: Vec<C64>,
    /// ⟨C_j|H|C_j⟩ = −κ cot(πj/N)/2N.
    pub energies: Vec<f64>,
    /// Unitary with columns |W⟩, |C_1⟩, …, |C_{N−1}⟩ in the position basis
    /// (atoms indexed in propagation order).
    pub basis: CMatrix,
}

pub fn mode_energy(n: usize, kappa: f64, j: usize) -> f64 {
    let nf = n as f64;
    -kappa / (2.0 * nf) / (PI * j as f64 / nf).tan()
}

pub fn mode_coupling(n: usize, kappa: f64, j: usize) -> C64 {
    let nf = n as f64;
    C64::new(1.0 / (PI * j as f64 / nf).tan(), 1.0) * (kappa / (2.0 * nf))
}

/// Closed-form eigenmodes for N atoms in propagation order. The
/// subradiant modes are discrete Fourier modes, phased so that their
/// coupling to |W⟩ takes the value of [`mode_coupling`].
pub fn build_exchange_eigenmode(n_atoms: usize, kappa: f64) -> Result<Eigenmodes> {
    if n_atoms < 2 {
        return Err(Error::invalid("eigenmode decomposition needs at least two atoms"));
    }
    let n = n_atoms;
    let nf = n as f64;
    let norm = 1.0 / nf.sqrt();
    let mut basis = CMatrix::from_element(n, n, C64::new(norm, 0.0));
    let mut energies = Vec::with_capacity(n - 1);
    let mut couplings = Vec::with_capacity(n - 1);
    for j in 1..n {
        let m = (n - j) as f64;
        let target = mode_coupling(n, kappa, j);
        let v: Vec<C64> = (0..n)
            .map(|r| C64::from_polar(norm, 2.0 * PI * m * r as f64 / nf))
            .collect();
        // ⟨W|H|v⟩ via the rank structure of the exchange matrix
        let total: C64 = v.iter().sum();
        let mut prefix = C64::new(0.0, 0.0);
        let mut overlap = C64::new(0.0, 0.0);
        for c in &v {
            overlap += prefix * 2.0 - total + c;
            prefix += c;
        }
        overlap *= C64::new(0.0, kappa / (2.0 * nf)) * norm;
        let phase = target / overlap;
        let phase = phase / phase.norm();
        for (r, c) in v.iter().enumerate() {
            basis[(r, j)] = c * phase;
        }
        energies.push(mode_energy(n, kappa, j));
        couplings.push(target);
    }
    Ok(Eigenmodes {
        couplings,
        energies,
        basis,
    })
}

use std::f64::consts::PI;

use nalgebra::{DMatrix, DVector};
use num_complex::Complex64 as C64;
use superatom::lindblad::{CMatrix, DensityMatrix, PropagateOptions};
use superatom::waveguide::{
    apply_thermal_detunings, build_exchange_position, density_observables, ground_state,
    propagate_density, propagate_trajectories, ThermalMotion, TrajectoryOptions, WaveguideConfig,
};
use superatom::PulseShape;

fn c(x: f64) -> C64 {
    C64::new(x, 0.0)
}

/// Hamiltonian in the reduced basis written out element by element.
fn brute_hamiltonian(n: usize, kappa: f64, drive: f64) -> CMatrix {
    let m = n + 1;
    let mut h = CMatrix::zeros(m, m);
    for l in 0..n {
        h[(l + 1, 0)] = c(drive / (n as f64).sqrt());
        h[(0, l + 1)] = c(drive / (n as f64).sqrt());
        for j in 0..n {
            let s = if l > j { 1.0 } else if l < j { -1.0 } else { 0.0 };
            h[(l + 1, j + 1)] = C64::new(0.0, kappa / (2.0 * n as f64) * s);
        }
    }
    h
}

fn superoperator(h: &CMatrix, jumps: &[(f64, CMatrix)]) -> CMatrix {
    let m = h.nrows();
    let id = CMatrix::identity(m, m);
    let minus_i = C64::new(0.0, -1.0);
    let mut l = (id.kronecker(h) - h.transpose().kronecker(&id)) * minus_i;
    for (rate, op) in jumps {
        let ld = op.adjoint() * op;
        l += (op.conjugate().kronecker(op) - id.kronecker(&ld) * c(0.5) - ld.transpose().kronecker(&id) * c(0.5))
            * c(*rate);
    }
    l
}

#[test]
fn three_atoms_match_brute_force_superoperator() {
    let n = 3;
    let (kappa, gamma) = (0.8, 0.15);
    let pulse = PulseShape::new(0.3, 0.1, 6.0, 0.0).unwrap();
    let cfg = WaveguideConfig::ordered(n, kappa, gamma).unwrap();
    let grid: Vec<f64> = (0..=10).map(|k| -0.3 + 0.05 * k as f64).collect();
    let opts = PropagateOptions::default().with_rtol(1e-11).with_atol(1e-13);
    let prop = propagate_density(&cfg, &pulse, &ground_state(&cfg), &grid, &opts).unwrap();

    let m = n + 1;
    let mut jumps = Vec::new();
    let mut w = CMatrix::zeros(m, m);
    for l in 0..n {
        w[(0, l + 1)] = c(1.0 / (n as f64).sqrt());
        let mut s = CMatrix::zeros(m, m);
        s[(0, l + 1)] = c(1.0);
        jumps.push((gamma, s));
    }
    jumps.push((kappa, w));
    let lvec = |t: f64| superoperator(&brute_hamiltonian(n, kappa, 2.0 * (kappa * pulse.rate(t)).sqrt()), &jumps);
    let mut y = DVector::from_element(m * m, c(0.0));
    y[0] = c(1.0);
    let dt = 1e-4;
    let steps_per_sample = 500;
    for (k, &t_k) in grid.iter().enumerate().skip(1) {
        for s in 0..steps_per_sample {
            let t = t_k - 0.05 + s as f64 * dt;
            let k1 = lvec(t) * &y;
            let k2 = lvec(t + dt / 2.0) * (&y + &k1 * c(dt / 2.0));
            let k3 = lvec(t + dt / 2.0) * (&y + &k2 * c(dt / 2.0));
            let k4 = lvec(t + dt) * (&y + &k3 * c(dt));
            y += (k1 + k2 * c(2.0) + k3 * c(2.0) + k4) * c(dt / 6.0);
        }
        let rho = DMatrix::from_column_slice(m, m, y.as_slice());
        let diff = (prop.states[k].matrix() - rho).camax();
        assert!(diff < 1e-8, "t = {t_k}: deviation {diff}");
    }
}

#[test]
fn single_atom_is_amplitude_damping() {
    let cfg = WaveguideConfig::ordered(1, 0.6, 0.2).unwrap();
    let pulse = PulseShape::new(0.0, 0.0, 0.0, 0.0).unwrap();
    let mut rho = CMatrix::zeros(2, 2);
    rho[(1, 1)] = c(1.0);
    let grid: Vec<f64> = (0..=20).map(|k| 0.1 * k as f64).collect();
    let prop = propagate_density(
        &cfg,
        &pulse,
        &DensityMatrix::from_matrix(rho).unwrap(),
        &grid,
        &PropagateOptions::default(),
    )
    .unwrap();
    for (t, s) in grid.iter().zip(&prop.states) {
        assert!((s.population(1) - (-0.8 * t).exp()).abs() < 1e-8);
    }
}

#[test]
fn zero_kappa_freezes_all_but_raman_decay() {
    let n = 4;
    let cfg = WaveguideConfig::ordered(n, 0.0, 0.3).unwrap();
    let pulse = PulseShape::new(0.0, 0.0, 0.0, 0.0).unwrap();
    let mut psi = vec![c(0.0); n + 1];
    psi[1] = C64::new(0.6, 0.0);
    psi[3] = C64::new(0.0, 0.8);
    let rho0 = DensityMatrix::pure(&psi).unwrap();
    let grid = [0.0, 1.0, 2.5];
    let prop = propagate_density(&cfg, &pulse, &rho0, &grid, &PropagateOptions::default()).unwrap();
    for (t, s) in grid.iter().zip(&prop.states) {
        let f = (-0.3 * t).exp();
        assert!((s.population(1) - 0.36 * f).abs() < 1e-9);
        assert!((s.population(3) - 0.64 * f).abs() < 1e-9);
        assert!((s.entry(1, 3) - rho0.entry(1, 3) * f).norm() < 1e-9);
    }
}

#[test]
fn exchange_spectrum_matches_dense_diagonalization() {
    for n in [4usize, 10, 37] {
        let kappa = 0.45;
        let cfg = WaveguideConfig::random(n, kappa, 0.0, n as u64).unwrap();
        let h = build_exchange_position(&cfg.positions, cfg.k0, kappa).unwrap();
        // orthonormal complement of |W⟩ from a Householder reflection
        let mut u = DVector::from_element(n, c(1.0 / (n as f64).sqrt()));
        u[0] -= c(1.0);
        let q_full = CMatrix::identity(n, n) - (&u * u.adjoint()) * c(2.0 / u.norm_squared());
        let q = q_full.columns(1, n - 1).into_owned();
        let block = q.adjoint() * &h * &q;
        let mut eig: Vec<f64> = block.symmetric_eigenvalues().iter().cloned().collect();
        eig.sort_by(|a, b| a.partial_cmp(b).unwrap());
        let mut expect: Vec<f64> = (1..n)
            .map(|j| -kappa / (2.0 * n as f64) / (PI * j as f64 / n as f64).tan())
            .collect();
        expect.sort_by(|a, b| a.partial_cmp(b).unwrap());
        for (a, b) in eig.iter().zip(&expect) {
            assert!((a - b).abs() < 1e-10, "N = {n}: {a} vs {b}");
        }
    }
}

#[test]
fn eigenmode_basis_relabels_with_positions() {
    let cfg = WaveguideConfig::random(8, 0.5, 0.0, 11).unwrap();
    let h = build_exchange_position(&cfg.positions, cfg.k0, cfg.kappa).unwrap();
    let modes = cfg.eigenmodes().unwrap();
    let ht = modes.basis.adjoint() * h * &modes.basis;
    for j in 1..8 {
        assert!((ht[(0, j)] - modes.couplings[j - 1]).norm() < 1e-13);
        assert!((ht[(j, j)].re - modes.energies[j - 1]).abs() < 1e-13);
    }
}

#[test]
fn only_bright_state_radiates() {
    // with Γ = 0 and no drive, d(P_exc)/dt = −κ P_W
    let cfg = WaveguideConfig::random(6, 0.9, 0.0, 4).unwrap();
    let pulse = PulseShape::new(1.0, 0.2, 5.0, 0.0).unwrap();
    let grid: Vec<f64> = (0..=300).map(|k| -1.0 + 0.01 * k as f64).collect();
    let opts = PropagateOptions::default().with_rtol(1e-11).with_atol(1e-13);
    let obs = density_observables(&cfg, &pulse, &grid, &opts).unwrap();
    for k in 101..299 {
        let deriv = (obs.p_excited[k + 1] - obs.p_excited[k - 1]) / 0.02;
        assert!((deriv + 0.9 * obs.p_bright[k]).abs() < 1e-4, "k = {k}");
    }
}

#[test]
fn trajectories_without_decay_conserve_norm() {
    let cfg = WaveguideConfig::ordered(5, 0.0, 0.0).unwrap();
    let pulse = PulseShape::new(1.0, 0.2, 5.0, 0.0).unwrap();
    let grid: Vec<f64> = (0..=20).map(|k| -1.0 + 0.1 * k as f64).collect();
    let opts = TrajectoryOptions {
        n_trajectories: 1,
        ..Default::default()
    };
    let obs = propagate_trajectories(&cfg, &pulse, &grid, &opts).unwrap();
    for k in 0..grid.len() {
        let total = obs.p_ground[k] + obs.p_excited[k];
        assert!((total - 1.0).abs() < 1e-8);
    }
}

#[test]
fn single_trajectory_is_reproducible() {
    let cfg = WaveguideConfig::ordered(4, 0.7, 0.2).unwrap();
    let pulse = PulseShape::new(1.0, 0.2, 8.0, 0.0).unwrap();
    let grid: Vec<f64> = (0..=40).map(|k| -1.0 + 0.1 * k as f64).collect();
    let opts = TrajectoryOptions {
        n_trajectories: 1,
        seed: 42,
        ..Default::default()
    };
    let a = propagate_trajectories(&cfg, &pulse, &grid, &opts).unwrap();
    let b = propagate_trajectories(&cfg, &pulse, &grid, &opts).unwrap();
    assert_eq!(a, b);
}

#[test]
fn dynamics_depend_only_on_ordering() {
    let pulse = PulseShape::new(0.8, 0.2, 10.0, 0.0).unwrap();
    let grid: Vec<f64> = (0..=30).map(|k| -0.8 + 0.1 * k as f64).collect();
    let mut a = WaveguideConfig::ordered(6, 0.6, 0.1).unwrap().with_gamma_d(0.2);
    a.positions = vec![0.0, 0.3, 0.1, 2.0, 5.0, 0.2];
    let mut b = a.clone();
    b.positions = vec![-4.0, 1.5, 1.0, 7.0, 7.5, 1.2];
    let opts = TrajectoryOptions {
        n_trajectories: 50,
        seed: 3,
        ..Default::default()
    };
    let ta = propagate_trajectories(&a, &pulse, &grid, &opts).unwrap();
    let tb = propagate_trajectories(&b, &pulse, &grid, &opts).unwrap();
    assert_eq!(ta, tb);
}

#[test]
fn trajectories_converge_to_density_matrix() {
    let cfg = WaveguideConfig::random(3, 0.7, 0.15, 8).unwrap().with_gamma_d(0.4);
    let pulse = PulseShape::new(1.0, 0.2, 6.0, 0.0).unwrap();
    let grid: Vec<f64> = (0..=30).map(|k| -1.0 + 0.1 * k as f64).collect();
    let dens = density_observables(&cfg, &pulse, &grid, &PropagateOptions::default()).unwrap();
    let opts = TrajectoryOptions {
        n_trajectories: 4000,
        seed: 5,
        ..Default::default()
    };
    let traj = propagate_trajectories(&cfg, &pulse, &grid, &opts).unwrap();
    for k in 0..grid.len() {
        let tol = 4.0 * traj.p_bright_se[k];
        assert!((traj.p_bright[k] - dens.p_bright[k]).abs() <= tol, "P_W at {}: {} {} {}", grid[k], traj.p_bright[k], dens.p_bright[k], traj.p_bright_se[k]);
        let tol = 4.0 * traj.emission_se[k];
        assert!((traj.emission[k] - dens.emission[k]).abs() <= tol, "flux at {}", grid[k]);
    }
}

#[test]
fn thermal_detunings_have_the_configured_spread() {
    let mut cfg = WaveguideConfig::ordered(4000, 0.45, 0.1).unwrap();
    let thermal = ThermalMotion {
        spin_wavelength: 1.26,
        velocity_scale: 0.035 * 1.26,
    };
    cfg.thermal = Some(thermal);
    let a = apply_thermal_detunings(&cfg, 1).unwrap();
    let b = apply_thermal_detunings(&cfg, 2).unwrap();
    assert_ne!(a.detunings, b.detunings);
    let expect = thermal.rms_detuning();
    for d in [&a.detunings, &b.detunings] {
        let n = d.len() as f64;
        let mean = d.iter().sum::<f64>() / n;
        let rms = (d.iter().map(|x| x * x).sum::<f64>() / n).sqrt();
        assert!(mean.abs() < 4.0 * expect / n.sqrt());
        assert!((rms / expect - 1.0).abs() < 0.05);
    }
}

#[test]
fn zero_temperature_leaves_dynamics_unchanged() {
    let mut cfg = WaveguideConfig::ordered(5, 0.5, 0.1).unwrap();
    let pulse = PulseShape::new(1.0, 0.2, 6.0, 0.0).unwrap();
    let grid: Vec<f64> = (0..=20).map(|k| -1.0 + 0.1 * k as f64).collect();
    let base = density_observables(&cfg, &pulse, &grid, &PropagateOptions::default()).unwrap();
    cfg.thermal = Some(ThermalMotion::from_lab(2.0 * PI / 0.780, -2.0 * PI / 0.480, 0.0).unwrap());
    let cold = apply_thermal_detunings(&cfg, 9).unwrap();
    let obs = density_observables(&cold, &pulse, &grid, &PropagateOptions::default()).unwrap();
    assert_eq!(base.emission, obs.emission);
}

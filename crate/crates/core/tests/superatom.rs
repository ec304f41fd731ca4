use approx::assert_relative_eq;
use superatom::analysis::{analyze_decay, AnalysisOptions};
use superatom::lindblad::PropagateOptions;
use superatom::params::CALIBRATED_SETS;
use superatom::superatom::{simulate_trace, FourLevelModel, Level};
use superatom::trace::{aligned_edges, TraceSimulator};
use superatom::{EffectiveParams, PulseShape};

fn row1() -> EffectiveParams {
    CALIBRATED_SETS[0].effective()
}

/// Resonantly driven two-level emitter: Rabi frequency Ω = 4√(κR), decay γ.
fn bloch_steady_state(kappa: f64, r_p: f64, gamma: f64) -> (f64, f64) {
    let omega = 4.0 * (kappa * r_p).sqrt();
    let den = gamma * gamma + 2.0 * omega * omega;
    (omega * omega / den, omega * gamma / den)
}

#[test]
fn long_pulse_reaches_bloch_steady_state() {
    for r_p in [0.05, 15.0] {
        let eff = EffectiveParams::new(0.46, 0.15, 0.0, 0.0, r_p);
        let shape = PulseShape::new(40.0, 0.2, r_p, 0.0).unwrap();
        let edges = aligned_edges(-1.02, -0.98, 0.02, 0.0).unwrap();
        let sim = simulate_trace(&eff, &shape, &edges, &PropagateOptions::default()).unwrap();
        let state = sim.states.last().unwrap();
        let (p_w, coh) = bloch_steady_state(0.46, r_p, 0.61);
        assert_relative_eq!(state.population(Level::W), p_w, max_relative = 1e-6);
        assert_relative_eq!(state.coherence(Level::W, Level::G).norm(), coh, max_relative = 1e-6);
        let expected = r_p + 0.46 * p_w - 2.0 * (0.46 * r_p).sqrt() * coh;
        assert_relative_eq!(sim.trace.rates()[0], expected, max_relative = 1e-6);
    }
}

#[test]
fn weak_drive_transmission() {
    let (kappa, gamma, r_p) = (0.2, 1.0, 1e-4);
    let eff = EffectiveParams::new(kappa, gamma - kappa, 0.0, 0.0, r_p);
    let shape = PulseShape::new(40.0, 0.2, r_p, 0.0).unwrap();
    let edges = aligned_edges(-1.02, -0.98, 0.02, 0.0).unwrap();
    let sim = simulate_trace(&eff, &shape, &edges, &PropagateOptions::default()).unwrap();
    let t = sim.trace.rates()[0] / r_p;
    assert_relative_eq!(t, (1.0 - 4.0 * kappa / gamma).powi(2), epsilon = 1e-3);
}

#[test]
fn incoherent_limit_decays_exponentially() {
    let eff = row1().with_varkappa(0.0);
    let model = FourLevelModel::new(eff);
    let shape = PulseShape::new(1.3, 0.2, 15.0, 0.0).unwrap();
    let edges = aligned_edges(-1.5, 4.0, 0.02, 0.0).unwrap();
    let rates = model.simulate(&shape, &edges).unwrap().rates();
    let first = edges.iter().position(|&e| e >= 0.0).unwrap();
    let ratio = (-1.46f64 * 0.02).exp();
    for w in rates[first..].windows(2) {
        assert_relative_eq!(w[1] / w[0], ratio, max_relative = 1e-6);
    }
    let fit = analyze_decay(&model.simulate(&shape, &edges).unwrap(), &shape, &AnalysisOptions::default()).unwrap();
    assert_relative_eq!(fit.gamma, 1.46, max_relative = 1e-4);
}

#[test]
fn exchange_sign_is_unobservable() {
    let shape = PulseShape::new(0.9, 0.2, 15.0, 0.0).unwrap();
    let edges = aligned_edges(-1.0, 5.0, 0.02, 0.0).unwrap();
    let plus = FourLevelModel::new(row1()).simulate(&shape, &edges).unwrap().rates();
    let minus = FourLevelModel::new(row1().with_varkappa(-0.31))
        .simulate(&shape, &edges)
        .unwrap()
        .rates();
    for (a, b) in plus.iter().zip(&minus) {
        assert!((a - b).abs() <= 1e-9 * (1.0 + a.abs()), "{a} vs {b}");
    }
}

#[test]
fn post_pulse_photon_number_bounded() {
    for set in &CALIBRATED_SETS {
        for len in [0.3, 0.8, 2.0, 5.0] {
            let eff = set.effective();
            let shape = PulseShape::with_clamped_taper(len, 0.2, set.r_p, 0.0).unwrap();
            let edges = aligned_edges(-len - 0.1, 20.0, 0.01, 0.0).unwrap();
            let sim = simulate_trace(&eff, &shape, &edges, &PropagateOptions::default()).unwrap();
            let first = edges.iter().position(|&e| e >= 0.0).unwrap();
            let emitted: f64 = sim.trace.rates()[first..].iter().map(|r| r * 0.01).sum();
            let p_exc = sim.states[first].population(Level::W) + sim.states[first].population(Level::C);
            assert!(emitted <= 1.0, "{emitted}");
            assert!(emitted <= p_exc + 1e-3, "{emitted} > {p_exc}");
            assert!(sim.diagnostics.max_trace_error <= 1e-8);
            assert!(sim.diagnostics.max_hermiticity_error <= 1e-10);
            assert!(sim.diagnostics.min_eigenvalue >= -1e-8);
        }
    }
}

#[test]
fn populations_stay_normalized_and_dark_state_fills() {
    let shape = PulseShape::new(2.0, 0.2, 15.0, 0.0).unwrap();
    let edges = aligned_edges(-2.1, 30.0, 0.1, 0.0).unwrap();
    let sim = simulate_trace(&row1(), &shape, &edges, &PropagateOptions::default()).unwrap();
    for s in &sim.states {
        let total: f64 = Level::ALL.iter().map(|&l| s.population(l)).sum();
        assert_relative_eq!(total, 1.0, epsilon = 1e-9);
    }
    let d: Vec<f64> = sim.states.iter().map(|s| s.population(Level::D)).collect();
    assert!(d.iter().cloned().fold(0.0, f64::max) > 0.05);
    let at = |t: f64| d[sim.times.iter().position(|&x| x >= t).unwrap()];
    assert_relative_eq!(at(29.95) / at(19.95), (-0.15f64 * 10.0).exp(), max_relative = 1e-4);
}

#[test]
fn model_trait_matches_direct_simulation() {
    let shape = PulseShape::new(1.1, 0.2, 6.7, 0.0).unwrap();
    let edges = aligned_edges(-1.2, 3.0, 0.02, 0.0).unwrap();
    let eff = CALIBRATED_SETS[3].effective();
    let direct = simulate_trace(&eff, &shape, &edges, &PropagateOptions::default()).unwrap();
    let via_trait = FourLevelModel::new(eff.with_r_p(99.0)).simulate(&shape, &edges).unwrap();
    assert_eq!(direct.trace, via_trait);
}

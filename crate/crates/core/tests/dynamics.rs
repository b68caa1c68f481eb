use approx::assert_abs_diff_eq;
use bbi_core::dynamics::{
    adiabatic_load, adiabatic_load_with_step, propagate, simulate_bloch_oscillations, simulate_kapitza_dirac,
    simulate_michelson_1d, simulate_michelson_2d, AccelerationVector, Axis, ControlWaveform, MichelsonComponents,
    MomentumGrid, SequenceTiming, DEFAULT_DT_NS,
};
use bbi_core::lattice::{bloch_state, momentum_populations, BlochIndex, LatticeConfig, MomentumWavefunction};
use proptest::prelude::*;

fn lattice(depth: f64) -> LatticeConfig {
    LatticeConfig::with_depth(depth).unwrap()
}

/// Smooth multi-tone phase modulation.
fn shaking(duration_us: f64, tones: &[(f64, f64, f64)]) -> ControlWaveform {
    let n = (duration_us / (DEFAULT_DT_NS * 1e-3)).round() as usize;
    let samples = (0..n)
        .map(|k| {
            let t = (k as f64 + 0.5) * DEFAULT_DT_NS * 1e-3;
            tones
                .iter()
                .map(|(amp, f_khz, ph)| amp * (2.0 * std::f64::consts::PI * f_khz * 1e-3 * t + ph).sin())
                .sum()
        })
        .collect();
    ControlWaveform::new(DEFAULT_DT_NS, samples, Axis::X).unwrap()
}

fn components(offset: f64) -> MichelsonComponents {
    let t = SequenceTiming::desk_scale();
    let shift = |w: ControlWaveform| {
        ControlWaveform::new(w.dt_ns, w.samples.iter().map(|p| p + offset).collect(), w.axis).unwrap()
    };
    MichelsonComponents {
        beamsplitter: shift(shaking(t.beamsplitter_us, &[(1.2, 24.0, 0.3), (0.4, 51.0, 1.0)])),
        mirror: shift(shaking(t.mirror_us, &[(1.6, 23.0, -0.7), (0.5, 47.0, 0.2)])),
    }
}

fn max_diff(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).fold(0.0, |m, (x, y)| m.max((x - y).abs()))
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn propagation_is_unitary(
        depth in 0.0..30.0f64,
        accel in -2.0..2.0f64,
        samples in prop::collection::vec(-std::f64::consts::PI..std::f64::consts::PI, 1..200),
    ) {
        let cfg = lattice(depth);
        let psi = bloch_state(&cfg, BlochIndex::ground()).unwrap();
        let w = ControlWaveform::new(DEFAULT_DT_NS, samples, Axis::Z).unwrap();
        let out = propagate(&psi, &cfg, &w, accel, 472.0).unwrap();
        let drift = (out.state.norm_sqr() - 1.0).abs();
        prop_assert!(drift < 1e-9, "norm drift {drift}");
    }

    #[test]
    fn free_space_ignores_shaking(
        j in -3i32..=3,
        samples in prop::collection::vec(-10.0..10.0f64, 1..100),
    ) {
        let cfg = lattice(0.0);
        let psi = MomentumWavefunction::plane_wave(0.0, cfg.truncation, j).unwrap();
        let w = ControlWaveform::new(DEFAULT_DT_NS, samples, Axis::X).unwrap();
        let out = propagate(&psi, &cfg, &w, 0.0, 100.0).unwrap();
        let p = momentum_populations(&out.state).unwrap();
        prop_assert!((p.port(j) - 1.0).abs() < 1e-12);
    }

    #[test]
    fn static_bloch_state_is_stationary(depth in 0.5..30.0f64, q in -0.9..0.9f64, phase in -3.0..3.0f64) {
        let cfg = lattice(depth);
        let psi = bloch_state(&cfg, BlochIndex::new(0, q)).unwrap().gauge_shifted(phase);
        let w = ControlWaveform::constant_for(50.0, phase, Axis::X).unwrap();
        let out = propagate(&psi, &cfg, &w, 0.0, 50.0).unwrap();
        let overlap = psi.inner(&out.state).unwrap().norm_sqr();
        prop_assert!((overlap - 1.0).abs() < 1e-9, "overlap {overlap}");
    }
}

#[test]
fn one_bloch_period_returns_the_ground_state() {
    let cfg = lattice(10.0);
    let psi = bloch_state(&cfg, BlochIndex::ground()).unwrap();
    let period_us = cfg.physical.bloch_period(1.0) * 1e6;
    let w = ControlWaveform::constant(DEFAULT_DT_NS, 1, 0.0, Axis::Z).unwrap();
    let out = propagate(&psi, &cfg, &w, 1.0, period_us).unwrap();
    assert_abs_diff_eq!(out.state.quasimomentum(), 0.0, epsilon = 1e-9);
    let overlap = psi.inner(&out.state).unwrap().norm_sqr();
    assert!(1.0 - overlap < 1e-3, "overlap {overlap} after one period");
}

#[test]
fn halving_the_step_changes_little() {
    let cfg = lattice(10.0);
    let psi = bloch_state(&cfg, BlochIndex::ground()).unwrap();
    let w = shaking(472.0, &[(1.0, 25.0, 0.0)]);
    let fine = ControlWaveform::new(
        w.dt_ns / 2.0,
        w.samples.iter().flat_map(|&p| [p, p]).collect(),
        w.axis,
    )
    .unwrap();
    let a = propagate(&psi, &cfg, &w, 1.0, 472.0).unwrap();
    let b = propagate(&psi, &cfg, &fine, 1.0, 472.0).unwrap();
    let pa = momentum_populations(&a.state).unwrap();
    let pb = momentum_populations(&b.state).unwrap();
    let d = max_diff(&pa.probabilities, &pb.probabilities);
    assert!(d < 1e-4, "step-halving difference {d}");
}

#[test]
fn waveform_offset_is_a_gauge() {
    let cfg = lattice(10.0);
    let t = SequenceTiming::desk_scale();
    let base = components(0.0);
    let moved = components(0.83);
    for accel in [0.0, 0.05, -0.12] {
        let a = simulate_michelson_1d(&cfg, &base.beamsplitter, &base.mirror, accel, &t).unwrap();
        let b = simulate_michelson_1d(&cfg, &moved.beamsplitter, &moved.mirror, accel, &t).unwrap();
        let d = max_diff(&a.final_ports.probabilities, &b.final_ports.probabilities);
        assert!(d < 1e-10, "offset changed the output by {d} at a = {accel}");
    }
}

#[test]
fn reversing_acceleration_and_phase_mirrors_ports() {
    let cfg = lattice(10.0);
    let t = SequenceTiming::desk_scale();
    let c = components(0.0);
    let negate = |w: &ControlWaveform| {
        ControlWaveform::new(w.dt_ns, w.samples.iter().map(|p| -p).collect(), w.axis).unwrap()
    };
    for accel in [0.03, 0.2] {
        let a = simulate_michelson_1d(&cfg, &c.beamsplitter, &c.mirror, accel, &t).unwrap();
        let b = simulate_michelson_1d(&cfg, &negate(&c.beamsplitter), &negate(&c.mirror), -accel, &t).unwrap();
        let d = max_diff(&a.final_ports.probabilities, &b.final_ports.mirrored());
        assert!(d < 1e-10, "mirror symmetry broken by {d} at a = {accel}");
    }
}

#[test]
fn grid_is_the_outer_product_of_axes() {
    let cfg = lattice(10.0);
    let t = SequenceTiming::desk_scale();
    let c = components(0.0);
    let accel = AccelerationVector::new(0.07, -0.11).unwrap();
    let g = simulate_michelson_2d(&cfg, &c, &c, accel, &t).unwrap();
    let x = simulate_michelson_1d(&cfg, &c.beamsplitter, &c.mirror, accel.a_x, &t).unwrap();
    let z = simulate_michelson_1d(&cfg, &c.beamsplitter, &c.mirror, accel.a_z, &t).unwrap();
    assert_eq!(g, MomentumGrid::from((&x.final_ports, &z.final_ports)));
    assert!(g.validate().is_ok());
}

#[test]
fn output_responds_to_small_accelerations() {
    let cfg = lattice(10.0);
    let t = SequenceTiming::desk_scale();
    let c = components(0.0);
    let at = |a: f64| simulate_michelson_1d(&cfg, &c.beamsplitter, &c.mirror, a, &t).unwrap().final_ports;
    let d = max_diff(&at(0.0).probabilities, &at(0.01).probabilities);
    assert!(d > 1e-5, "no response to 0.01 g: {d}");
}

/// Peak of the periodogram of `y` over trial frequencies, in cycles per μs.
fn periodogram_peak(times: &[f64], y: &[f64], f_lo: f64, f_hi: f64) -> f64 {
    let mean = y.iter().sum::<f64>() / y.len() as f64;
    let power = |f: f64| {
        let w = 2.0 * std::f64::consts::PI * f;
        let (c, s) = times.iter().zip(y).fold((0.0, 0.0), |(c, s), (&t, &v)| {
            (c + (v - mean) * (w * t).cos(), s + (v - mean) * (w * t).sin())
        });
        c * c + s * s
    };
    let n = 20_000;
    (0..=n)
        .map(|i| f_lo + (f_hi - f_lo) * i as f64 / n as f64)
        .max_by(|a, b| power(*a).total_cmp(&power(*b)))
        .unwrap()
}

#[test]
fn bloch_oscillations_have_the_bloch_period() {
    let cfg = lattice(10.0);
    for accel in [0.5, 1.0, 2.0] {
        let period_us = cfg.physical.bloch_period(accel) * 1e6;
        let holds: Vec<f64> = (0..400).map(|i| i as f64 * 8.0 * period_us / 400.0).collect();
        let s = simulate_bloch_oscillations(&cfg, accel, &holds).unwrap();
        assert!(!s.landau_zener_flagged());
        let f = periodogram_peak(&holds, &s.port_series(0), 0.5 / period_us, 1.5 / period_us);
        let rel = (1.0 / f - period_us).abs() / period_us;
        assert!(rel < 5e-3, "a = {accel}: period {} vs {period_us}", 1.0 / f);
    }
}

#[test]
fn opposite_forces_mirror_bloch_oscillations() {
    let cfg = lattice(6.0);
    let holds: Vec<f64> = (0..40).map(|i| 25.0 * i as f64).collect();
    let up = simulate_bloch_oscillations(&cfg, 0.8, &holds).unwrap();
    let down = simulate_bloch_oscillations(&cfg, -0.8, &holds).unwrap();
    for (a, b) in up.populations.iter().zip(&down.populations) {
        assert!(max_diff(&a.probabilities, &b.mirrored()) < 1e-10);
    }
}

#[test]
fn adiabatic_load_fidelity() {
    let cfg = lattice(10.0);
    let ramps = [0.001, 0.01, 0.03, 0.1, 0.3, 1.0];
    let f: Vec<f64> = ramps.iter().map(|&r| adiabatic_load(&cfg, r).unwrap().fidelity).collect();
    for w in f.windows(2) {
        assert!(w[1] >= w[0] - 1e-9, "fidelity not monotone: {f:?}");
    }
    assert!(f[5] > 0.999);

    // The sudden limit projects the plane wave onto the ground band.
    let ground = bloch_state(&cfg, BlochIndex::ground()).unwrap();
    let sudden = ground.amplitude(0).norm_sqr();
    assert_abs_diff_eq!(adiabatic_load(&cfg, 1e-6).unwrap().fidelity, sudden, epsilon = 1e-3);

    let coarse = adiabatic_load_with_step(&cfg, 0.5, 50.0).unwrap().fidelity;
    let fine = adiabatic_load_with_step(&cfg, 0.5, 25.0).unwrap().fidelity;
    assert!((coarse - fine).abs() < 1e-6, "{coarse} vs {fine}");
}

fn bessel_j(n: i32, x: f64) -> f64 {
    let n = n.unsigned_abs() as i32;
    let half = 0.5 * x;
    let mut term = half.powi(n) / (1..=n).map(f64::from).product::<f64>();
    let mut sum = term;
    for k in 1..200 {
        term *= -half * half / (f64::from(k) * f64::from(k + n));
        sum += term;
        if term.abs() < 1e-18 * sum.abs().max(1e-300) {
            break;
        }
    }
    sum
}

#[test]
fn kapitza_dirac_depth_round_trip() {
    let depth = 800.0;
    let cfg = lattice(depth);
    let phys = cfg.physical;
    // Area V0 t / 2 = 1.1 in natural units.
    let pulse_us = phys.natural_to_micros(2.2 / depth);
    let p = simulate_kapitza_dirac(&cfg, pulse_us).unwrap();
    let t = phys.micros_to_natural(pulse_us);
    // Invert p_0 = J_0²(V0 t / 2) on the first lobe.
    let (mut lo, mut hi) = (0.0, 2.4 / (0.5 * t));
    for _ in 0..100 {
        let mid = 0.5 * (lo + hi);
        if bessel_j(0, 0.5 * mid * t).powi(2) > p.port(0) {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    let recovered = 0.5 * (lo + hi);
    assert!((recovered - depth).abs() / depth < 0.02, "recovered {recovered}");
}

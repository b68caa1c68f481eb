use std::sync::OnceLock;

use bbi_core::control::{
    design_michelson_components, optimize_component, random_direction, ComponentSpec, ControlProblem,
    DesignedComponents, OptimizerConfig, StepRule, REFERENCE_DESIGN_SEED,
};
use bbi_core::dynamics::{propagate, SequenceTiming};
use bbi_core::lattice::{momentum_populations, LatticeConfig};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn lattice() -> LatticeConfig {
    LatticeConfig::with_depth(10.0).unwrap()
}

fn design() -> &'static DesignedComponents {
    static D: OnceLock<DesignedComponents> = OnceLock::new();
    D.get_or_init(|| {
        let cfg = OptimizerConfig {
            seed: REFERENCE_DESIGN_SEED,
            ..OptimizerConfig::default()
        };
        design_michelson_components(&lattice(), &SequenceTiming::desk_scale(), &cfg).unwrap()
    })
}

fn split_state() -> bbi_core::lattice::MomentumWavefunction {
    let t = SequenceTiming::desk_scale();
    let spec = ComponentSpec::beamsplitter(t.beamsplitter_us, 10.0);
    ControlProblem::new(&spec, &lattice(), 50.0)
        .unwrap()
        .final_state(&design().beamsplitter.waveform.samples)
}

#[test]
fn beamsplitter_splits_symmetrically_into_second_orders() {
    let d = design();
    assert!(d.beamsplitter.converged, "fidelity {}", d.beamsplitter.fidelity);
    let p = momentum_populations(&split_state()).unwrap();
    assert!(p.port(-2) + p.port(2) > 0.9, "{:?}", p.probabilities);
    assert!((p.port(-2) - p.port(2)).abs() < 0.02, "{:?}", p.probabilities);
}

#[test]
fn mirror_exchanges_momenta() {
    let d = design();
    assert!(d.mirror.converged, "fidelity {}", d.mirror.fidelity);
    let split = split_state();
    let out = propagate(&split, &lattice(), &d.mirror.waveform, 0.0, d.mirror.waveform.duration_us()).unwrap();
    let before = momentum_populations(&split).unwrap();
    let after = momentum_populations(&out.state).unwrap();
    let mirrored = before.mirrored();
    for (a, b) in after.probabilities.iter().zip(&mirrored) {
        assert!((a - b).abs() < 0.02, "{:?} vs {:?}", after.probabilities, mirrored);
    }
}

#[test]
fn backtracking_trace_is_monotone_within_restarts() {
    let spec = ComponentSpec::beamsplitter(60.0, 10.0);
    let cfg = OptimizerConfig {
        max_iterations: 300,
        fidelity_goal: 0.9999,
        seed: 4,
        step_rule: StepRule::Backtracking,
        ..OptimizerConfig::default()
    };
    let run = optimize_component(&spec, &cfg, &lattice()).unwrap();
    assert!(!run.trace.is_empty());
    for w in run.trace.windows(2) {
        if w[0].restart == w[1].restart {
            assert!(w[1].fidelity >= w[0].fidelity - 1e-12, "{:?} -> {:?}", w[0], w[1]);
        }
    }
}

#[test]
fn optimization_is_deterministic() {
    let spec = ComponentSpec::beamsplitter(40.0, 10.0);
    let cfg = OptimizerConfig {
        max_iterations: 60,
        seed: 17,
        ..OptimizerConfig::default()
    };
    let a = optimize_component(&spec, &cfg, &lattice()).unwrap();
    let b = optimize_component(&spec, &cfg, &lattice()).unwrap();
    assert_eq!(a.waveform, b.waveform);
    assert_eq!(a.trace, b.trace);
    let other = optimize_component(&spec, &OptimizerConfig { seed: 18, ..cfg }, &lattice()).unwrap();
    assert_ne!(a.waveform, other.waveform);
}

#[test]
fn adjoint_gradient_on_the_mirror_problem() {
    let spec = ComponentSpec::mirror(split_state(), 30.0, 10.0);
    let problem = ControlProblem::new(&spec, &lattice(), 50.0).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(20);
    let samples: Vec<f64> = (0..problem.n_samples()).map(|k| 1.5 * (k as f64 * 0.11).cos()).collect();
    let (_, grad) = problem.fidelity_and_gradient(&samples);
    for _ in 0..20 {
        let d = random_direction(samples.len(), &mut rng);
        let fd = problem.directional_derivative_fd(&samples, &d, 1e-4);
        let adj: f64 = grad.iter().zip(&d).map(|(g, x)| g * x).sum();
        assert!((adj - fd).abs() <= 1e-5 * fd.abs().max(1e-6), "adjoint {adj} vs fd {fd}");
    }
}

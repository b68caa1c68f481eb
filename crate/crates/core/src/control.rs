//! Shaking-waveform construction and gradient-based component design.
//!
//! The per-step propagator is `U_k = G(φ_k) W G(φ_k)†` with `G(φ) = diag(e^{ijφ})`,
//! so `∂U_k/∂φ_k = i [J, U_k]` exactly. The adjoint gradient of
//! `F = |⟨χ|ψ_N⟩|^2` then needs one forward and one backward sweep.

use std::collections::VecDeque;
use std::io::Write;

use num_complex::Complex64;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::dynamics::{
    samples_for, Axis, ControlWaveform, Evolver, MichelsonComponents, SequenceTiming, DEFAULT_DT_NS,
};
use crate::error::{Error, Result};
use crate::lattice::{bloch_state, BlochIndex, LatticeConfig, MomentumWavefunction};

/// `|⟨target|psi⟩|^2`.
pub fn fidelity(psi: &MomentumWavefunction, target: &MomentumWavefunction) -> Result<f64> {
    if psi.dim() != target.dim() {
        return Err(Error::DimensionMismatch {
            expected: target.dim(),
            got: psi.dim(),
        });
    }
    if (psi.quasimomentum() - target.quasimomentum()).abs() > 1e-12 {
        return Err(Error::InvalidInput(format!(
            "quasimomenta differ: {} vs {}",
            psi.quasimomentum(),
            target.quasimomentum()
        )));
    }
    Ok(target.inner(psi)?.norm_sqr().min(1.0))
}

/// Samples reversed in time.
pub fn time_reversed(waveform: &ControlWaveform) -> ControlWaveform {
    let mut out = waveform.clone();
    out.samples.reverse();
    out
}

/// Concatenates components, holding the previous component's last phase
/// for each gap (μs). `gaps_us` is empty or has one entry per boundary.
pub fn stitch(components: &[ControlWaveform], gaps_us: &[f64]) -> Result<ControlWaveform> {
    let first = components
        .first()
        .ok_or_else(|| Error::InvalidInput("nothing to stitch".into()))?;
    if !gaps_us.is_empty() && gaps_us.len() + 1 != components.len() {
        return Err(Error::InvalidInput(format!(
            "{} components need {} gaps, got {}",
            components.len(),
            components.len() - 1,
            gaps_us.len()
        )));
    }
    let dt = first.dt_ns;
    let mut samples = Vec::new();
    for (i, c) in components.iter().enumerate() {
        c.validate()?;
        if c.dt_ns != dt {
            return Err(Error::DtMismatch(dt, c.dt_ns));
        }
        if c.axis != first.axis {
            return Err(Error::InvalidInput("components drive different axes".into()));
        }
        if i > 0 {
            let gap = gaps_us.get(i - 1).copied().unwrap_or(0.0);
            let n = samples_for(gap, dt)?;
            let hold = samples.last().copied().unwrap_or(0.0);
            samples.extend(std::iter::repeat_n(hold, n));
        }
        samples.extend_from_slice(&c.samples);
    }
    ControlWaveform::new(dt, samples, first.axis)
}

/// Either a Bloch eigenstate or an explicit wavefunction.
#[derive(Clone, Debug)]
pub enum StateSpec {
    Bloch(BlochIndex),
    Explicit(MomentumWavefunction),
}

impl StateSpec {
    pub fn resolve(&self, lattice: &LatticeConfig) -> Result<MomentumWavefunction> {
        match self {
            StateSpec::Bloch(idx) => bloch_state(lattice, *idx),
            StateSpec::Explicit(psi) => {
                if psi.dim() != lattice.dim() {
                    return Err(Error::DimensionMismatch {
                        expected: lattice.dim(),
                        got: psi.dim(),
                    });
                }
                MomentumWavefunction::new(psi.quasimomentum(), psi.amplitudes().to_vec())
            }
        }
    }
}

/// A requested Bloch-state transformation.
#[derive(Clone, Debug)]
pub struct ComponentSpec {
    pub initial: StateSpec,
    pub target: StateSpec,
    pub duration_us: f64,
    /// Lattice depth in E_r.
    pub depth: f64,
    pub axis: Axis,
}

impl ComponentSpec {
    /// `|n=0, q=0⟩ -> |n=3, q=0⟩`.
    pub fn beamsplitter(duration_us: f64, depth: f64) -> Self {
        Self {
            initial: StateSpec::Bloch(BlochIndex::ground()),
            target: StateSpec::Bloch(BlochIndex::new(3, 0.0)),
            duration_us,
            depth,
            axis: Axis::X,
        }
    }

    /// Momentum reversal `c_j -> c_{-j}` of `incoming`.
    pub fn mirror(incoming: MomentumWavefunction, duration_us: f64, depth: f64) -> Self {
        let target = incoming.momentum_reversed();
        Self {
            initial: StateSpec::Explicit(incoming),
            target: StateSpec::Explicit(target),
            duration_us,
            depth,
            axis: Axis::X,
        }
    }
}

/// How the waveform is parametrized during optimization.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ControlBasis {
    /// One free parameter per sample; the first sample is pinned to zero.
    Samples,
    /// `φ_k = Σ_{m=1..modes} b_m sin(π m k / N)`, band-limited and zero at k = 0.
    Fourier { modes: usize },
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum StepRule {
    /// Plain gradient ascent with a constant step.
    Fixed { step: f64 },
    /// Limited-memory quasi-Newton direction with Armijo backtracking.
    Backtracking,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct OptimizerConfig {
    pub max_iterations: usize,
    pub fidelity_goal: f64,
    pub step_rule: StepRule,
    pub seed: u64,
    pub basis: ControlBasis,
    /// Gradient norm under which a run counts as stalled.
    pub gradient_tolerance: f64,
    /// Seeded random restarts allowed after a stall.
    pub max_restarts: usize,
    /// RMS phase (rad) of the random initial waveform.
    pub init_amplitude: f64,
    pub dt_ns: f64,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        Self {
            max_iterations: 1500,
            fidelity_goal: 0.999,
            step_rule: StepRule::Backtracking,
            seed: 0,
            basis: ControlBasis::Samples,
            gradient_tolerance: 1e-7,
            max_restarts: 8,
            init_amplitude: 2.0,
            dt_ns: DEFAULT_DT_NS,
        }
    }
}

impl OptimizerConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.fidelity_goal > 0.0 && self.fidelity_goal <= 1.0) {
            return Err(Error::InvalidInput(format!(
                "fidelity goal {} outside (0, 1]",
                self.fidelity_goal
            )));
        }
        if let StepRule::Fixed { step } = self.step_rule {
            if !(step.is_finite() && step > 0.0) {
                return Err(Error::InvalidInput(format!("bad fixed step {step}")));
            }
        }
        if let ControlBasis::Fourier { modes } = self.basis {
            if modes == 0 {
                return Err(Error::InvalidInput("Fourier basis needs at least one mode".into()));
            }
        }
        if !(self.dt_ns.is_finite() && self.dt_ns > 0.0) {
            return Err(Error::InvalidInput(format!("bad dt {}", self.dt_ns)));
        }
        Ok(())
    }
}

/// Fixed-`q`, zero-acceleration state-transfer problem on a sampled waveform.
#[derive(Clone, Debug)]
pub struct ControlProblem {
    lattice: LatticeConfig,
    initial: MomentumWavefunction,
    target: MomentumWavefunction,
    n_samples: usize,
    dt: f64,
    dt_ns: f64,
}

impl ControlProblem {
    pub fn new(spec: &ComponentSpec, lattice: &LatticeConfig, dt_ns: f64) -> Result<Self> {
        if !(spec.duration_us.is_finite() && spec.duration_us > 0.0) {
            return Err(Error::InvalidInput(format!("bad duration {}", spec.duration_us)));
        }
        let lattice = lattice.with_lattice_depth(spec.depth);
        lattice.validate()?;
        let initial = spec.initial.resolve(&lattice)?;
        let target = spec.target.resolve(&lattice)?;
        if (initial.quasimomentum() - target.quasimomentum()).abs() > 1e-12 {
            return Err(Error::InvalidInput(
                "initial and target quasimomenta differ; only fixed-q transfers are supported".into(),
            ));
        }
        let n_samples = samples_for(spec.duration_us, dt_ns)?;
        if n_samples == 0 {
            return Err(Error::InvalidInput("component shorter than one sample".into()));
        }
        Ok(Self {
            dt: lattice.physical.micros_to_natural(dt_ns * 1e-3),
            lattice,
            initial,
            target,
            n_samples,
            dt_ns,
        })
    }

    pub fn n_samples(&self) -> usize {
        self.n_samples
    }

    pub fn initial(&self) -> &MomentumWavefunction {
        &self.initial
    }

    pub fn target(&self) -> &MomentumWavefunction {
        &self.target
    }

    fn check_len(&self, samples: &[f64]) {
        assert_eq!(samples.len(), self.n_samples, "waveform length must match the problem");
    }

    pub fn final_state(&self, samples: &[f64]) -> MomentumWavefunction {
        self.check_len(samples);
        let mut psi = self.initial.clone();
        let mut ev = Evolver::new(self.lattice.truncation);
        let q = psi.quasimomentum();
        for &phase in samples {
            ev.step(psi.amplitudes_mut(), self.lattice.depth, q, phase, self.dt);
        }
        psi
    }

    pub fn fidelity(&self, samples: &[f64]) -> f64 {
        let psi = self.final_state(samples);
        self.target.inner(&psi).map(|o| o.norm_sqr()).unwrap_or(0.0)
    }

    /// Fidelity and its exact gradient with respect to every sample.
    pub fn fidelity_and_gradient(&self, samples: &[f64]) -> (f64, Vec<f64>) {
        self.check_len(samples);
        let n = samples.len();
        let dim = self.lattice.dim();
        let depth = self.lattice.depth;
        let q = self.initial.quasimomentum();
        let j0 = self.lattice.truncation as f64;
        let mut ev = Evolver::new(self.lattice.truncation);

        // Forward sweep, keeping every intermediate state.
        let mut forward = Vec::with_capacity((n + 1) * dim);
        let mut psi: Vec<Complex64> = self.initial.amplitudes().to_vec();
        forward.extend_from_slice(&psi);
        for &phase in samples {
            ev.step(&mut psi, depth, q, phase, self.dt);
            forward.extend_from_slice(&psi);
        }
        let overlap: Complex64 = self
            .target
            .amplitudes()
            .iter()
            .zip(&psi)
            .map(|(t, p)| t.conj() * p)
            .sum();

        // ⟨λ_k|J|ψ_k⟩ with λ_N = target and λ_{k-1} = U_k† λ_k.
        let j_expect = |lambda: &[Complex64], psi: &[Complex64]| -> Complex64 {
            lambda
                .iter()
                .zip(psi)
                .enumerate()
                .map(|(i, (l, p))| l.conj() * p * (i as f64 - j0))
                .sum()
        };
        let mut lambda: Vec<Complex64> = self.target.amplitudes().to_vec();
        let mut g_next = j_expect(&lambda, &forward[n * dim..]);
        let mut grad = vec![0.0; n];
        for k in (1..=n).rev() {
            ev.step(&mut lambda, depth, q, samples[k - 1], -self.dt);
            let g_prev = j_expect(&lambda, &forward[(k - 1) * dim..k * dim]);
            let d_overlap = Complex64::new(0.0, 1.0) * (g_next - g_prev);
            grad[k - 1] = 2.0 * (overlap.conj() * d_overlap).re;
            g_next = g_prev;
        }
        (overlap.norm_sqr(), grad)
    }

    /// Central-difference derivative of the fidelity along `direction`.
    pub fn directional_derivative_fd(&self, samples: &[f64], direction: &[f64], h: f64) -> f64 {
        let plus: Vec<f64> = samples.iter().zip(direction).map(|(s, d)| s + h * d).collect();
        let minus: Vec<f64> = samples.iter().zip(direction).map(|(s, d)| s - h * d).collect();
        (self.fidelity(&plus) - self.fidelity(&minus)) / (2.0 * h)
    }

    pub fn waveform(&self, samples: Vec<f64>, axis: Axis) -> Result<ControlWaveform> {
        ControlWaveform::new(self.dt_ns, samples, axis)
    }
}

/// Maps optimizer parameters to waveform samples.
struct Parametrization {
    basis: ControlBasis,
    n: usize,
}

impl Parametrization {
    fn sine(&self, m: usize, k: usize) -> f64 {
        (std::f64::consts::PI * m as f64 * k as f64 / self.n as f64).sin()
    }

    fn samples(&self, x: &[f64]) -> Vec<f64> {
        match self.basis {
            ControlBasis::Samples => {
                let mut s = x.to_vec();
                s[0] = 0.0;
                s
            }
            ControlBasis::Fourier { modes } => (0..self.n)
                .map(|k| (0..modes).map(|m| x[m] * self.sine(m + 1, k)).sum())
                .collect(),
        }
    }

    fn pull_back(&self, grad_samples: &[f64]) -> Vec<f64> {
        match self.basis {
            ControlBasis::Samples => {
                let mut g = grad_samples.to_vec();
                g[0] = 0.0;
                g
            }
            ControlBasis::Fourier { modes } => (0..modes)
                .map(|m| {
                    grad_samples
                        .iter()
                        .enumerate()
                        .map(|(k, g)| g * self.sine(m + 1, k))
                        .sum()
                })
                .collect(),
        }
    }

    fn random_start(&self, rng: &mut ChaCha8Rng, rms: f64) -> Vec<f64> {
        match self.basis {
            ControlBasis::Fourier { modes } => {
                let sd = rms * (2.0 / modes as f64).sqrt();
                let normal = Normal::new(0.0, sd).expect("finite sd");
                (0..modes).map(|_| normal.sample(rng)).collect()
            }
            ControlBasis::Samples => {
                // Smooth random start built from a few low modes.
                let modes = 8usize;
                let sd = rms * (2.0 / modes as f64).sqrt();
                let normal = Normal::new(0.0, sd).expect("finite sd");
                let b: Vec<f64> = (0..modes).map(|_| normal.sample(rng)).collect();
                (0..self.n)
                    .map(|k| (0..modes).map(|m| b[m] * self.sine(m + 1, k)).sum())
                    .collect()
            }
        }
    }
}

/// One row of the optimizer trace.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TraceRow {
    pub iteration: usize,
    /// Restarts taken before this row.
    pub restart: usize,
    pub fidelity: f64,
    pub gradient_norm: f64,
}

/// Output of [`optimize_component`].
#[derive(Clone, Debug)]
pub struct OptimizedComponent {
    pub waveform: ControlWaveform,
    pub fidelity: f64,
    pub converged: bool,
    pub iterations: usize,
    pub restarts: usize,
    pub trace: Vec<TraceRow>,
}

impl OptimizedComponent {
    pub fn write_trace_csv<W: Write>(&self, mut out: W) -> Result<()> {
        writeln!(out, "iteration,restart,fidelity,gradient_norm")?;
        for row in &self.trace {
            writeln!(out, "{},{},{},{}", row.iteration, row.restart, row.fidelity, row.gradient_norm)?;
        }
        Ok(())
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn norm(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

/// Designs a waveform that maximizes the transfer fidelity at zero acceleration.
///
/// Not reaching `fidelity_goal` is not an error: the best waveform is returned
/// with `converged == false`.
pub fn optimize_component(
    spec: &ComponentSpec,
    config: &OptimizerConfig,
    lattice: &LatticeConfig,
) -> Result<OptimizedComponent> {
    config.validate()?;
    let problem = ControlProblem::new(spec, lattice, config.dt_ns)?;
    let n = problem.n_samples();

    let idle = vec![0.0; n];
    let idle_fidelity = problem.fidelity(&idle);
    if idle_fidelity >= config.fidelity_goal {
        return Ok(OptimizedComponent {
            waveform: problem.waveform(idle, spec.axis)?,
            fidelity: idle_fidelity,
            converged: true,
            iterations: 0,
            restarts: 0,
            trace: Vec::new(),
        });
    }

    let param = Parametrization {
        basis: config.basis,
        n,
    };
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let evaluate = |x: &[f64]| -> (f64, Vec<f64>) {
        let (f, g) = problem.fidelity_and_gradient(&param.samples(x));
        (f, param.pull_back(&g))
    };

    let mut x = param.random_start(&mut rng, config.init_amplitude);
    let (mut f, mut g) = evaluate(&x);
    let mut best = (f, x.clone());
    let mut trace = vec![TraceRow {
        iteration: 0,
        restart: 0,
        fidelity: f,
        gradient_norm: norm(&g),
    }];
    let mut memory: VecDeque<(Vec<f64>, Vec<f64>, f64)> = VecDeque::new();
    const MEMORY: usize = 12;
    let mut restarts = 0;
    let mut iterations = 0;

    while iterations < config.max_iterations && best.0 < config.fidelity_goal {
        iterations += 1;
        let gnorm = norm(&g);
        let mut stalled = gnorm < config.gradient_tolerance;

        if !stalled {
            match config.step_rule {
                StepRule::Fixed { step } => {
                    x.iter_mut().zip(&g).for_each(|(xi, gi)| *xi += step * gi);
                    let (nf, ng) = evaluate(&x);
                    f = nf;
                    g = ng;
                }
                StepRule::Backtracking => {
                    // Minimize 1 - F: descent direction from the two-loop recursion on -g.
                    let mut d: Vec<f64> = g.clone();
                    let mut alphas = Vec::with_capacity(memory.len());
                    for (s, y, rho) in memory.iter().rev() {
                        let a = rho * dot(s, &d);
                        d.iter_mut().zip(y).for_each(|(di, yi)| *di -= a * yi);
                        alphas.push(a);
                    }
                    if let Some((s, y, _)) = memory.back() {
                        let gamma = dot(s, y) / dot(y, y);
                        d.iter_mut().for_each(|di| *di *= gamma);
                    } else {
                        let scale = (0.1 / gnorm).min(1.0);
                        d.iter_mut().for_each(|di| *di *= scale);
                    }
                    for ((s, y, rho), a) in memory.iter().zip(alphas.iter().rev()) {
                        let b = rho * dot(y, &d);
                        d.iter_mut().zip(s).for_each(|(di, si)| *di += (a - b) * si);
                    }
                    // d is an ascent direction for F.
                    let mut slope = dot(&g, &d);
                    if slope <= 0.0 {
                        memory.clear();
                        let scale = (0.1 / gnorm).min(1.0);
                        d = g.iter().map(|gi| gi * scale).collect();
                        slope = dot(&g, &d);
                    }
                    let mut t = 1.0;
                    let mut accepted = None;
                    for _ in 0..40 {
                        let trial: Vec<f64> = x.iter().zip(&d).map(|(xi, di)| xi + t * di).collect();
                        let (tf, tg) = evaluate(&trial);
                        if tf >= f + 1e-4 * t * slope && tf > f {
                            accepted = Some((trial, tf, tg));
                            break;
                        }
                        t *= 0.5;
                    }
                    match accepted {
                        Some((nx, nf, ng)) => {
                            let s: Vec<f64> = nx.iter().zip(&x).map(|(a, b)| a - b).collect();
                            // Curvature pair for the minimization of -F.
                            let y: Vec<f64> = g.iter().zip(&ng).map(|(a, b)| a - b).collect();
                            let sy = dot(&s, &y);
                            if sy > 1e-12 * norm(&s) * norm(&y) {
                                memory.push_back((s, y, 1.0 / sy));
                                if memory.len() > MEMORY {
                                    memory.pop_front();
                                }
                            }
                            x = nx;
                            f = nf;
                            g = ng;
                        }
                        None => stalled = true,
                    }
                }
            }
        }

        if f > best.0 {
            best = (f, x.clone());
        }
        trace.push(TraceRow {
            iteration: iterations,
            restart: restarts,
            fidelity: f,
            gradient_norm: norm(&g),
        });

        if stalled && best.0 < config.fidelity_goal {
            if restarts >= config.max_restarts {
                break;
            }
            restarts += 1;
            memory.clear();
            let kick = param.random_start(&mut rng, 0.5 * config.init_amplitude);
            x = best.1.iter().zip(&kick).map(|(b, k)| b + k).collect();
            let (nf, ng) = evaluate(&x);
            f = nf;
            g = ng;
        }
    }

    let samples = param.samples(&best.1);
    Ok(OptimizedComponent {
        waveform: problem.waveform(samples, spec.axis)?,
        fidelity: best.0,
        converged: best.0 >= config.fidelity_goal,
        iterations,
        restarts,
        trace,
    })
}

/// Seed of the reference component design used by the examples and the CLI defaults.
pub const REFERENCE_DESIGN_SEED: u64 = 6;

/// Beamsplitter and mirror designed as a pair.
#[derive(Clone, Debug)]
pub struct DesignedComponents {
    pub beamsplitter: OptimizedComponent,
    pub mirror: OptimizedComponent,
}

impl DesignedComponents {
    pub fn michelson(&self) -> MichelsonComponents {
        MichelsonComponents {
            beamsplitter: self.beamsplitter.waveform.clone(),
            mirror: self.mirror.waveform.clone(),
        }
    }

    /// Smaller of the two achieved fidelities.
    pub fn min_fidelity(&self) -> f64 {
        self.beamsplitter.fidelity.min(self.mirror.fidelity)
    }
}

/// Designs the beamsplitter, then a mirror that momentum-reverses its actual output.
pub fn design_michelson_components(
    lattice: &LatticeConfig,
    timing: &SequenceTiming,
    config: &OptimizerConfig,
) -> Result<DesignedComponents> {
    timing.validate()?;
    let bs_spec = ComponentSpec::beamsplitter(timing.beamsplitter_us, lattice.depth);
    let beamsplitter = optimize_component(&bs_spec, config, lattice)?;
    let split = ControlProblem::new(&bs_spec, lattice, config.dt_ns)?
        .final_state(&beamsplitter.waveform.samples);
    let mirror_spec = ComponentSpec::mirror(split, timing.mirror_us, lattice.depth);
    let mirror = optimize_component(&mirror_spec, config, lattice)?;
    Ok(DesignedComponents {
        beamsplitter,
        mirror,
    })
}

/// Random unit-norm direction, used by gradient checks.
pub fn random_direction(len: usize, rng: &mut impl Rng) -> Vec<f64> {
    let normal = Normal::new(0.0, 1.0).expect("unit normal");
    let d: Vec<f64> = (0..len).map(|_| normal.sample(rng)).collect();
    let n = norm(&d);
    d.into_iter().map(|x| x / n).collect()
}

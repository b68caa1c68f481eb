//! End-to-end simulated experiments.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::lattice::{
    bloch_state, momentum_populations, spectrum, BlochIndex, LatticeConfig, MomentumWavefunction,
    PortPopulations,
};

use super::propagate::{check_accel, check_leakage, evolve, step_plan, Evolver, Step};
use super::waveform::{ControlWaveform, DEFAULT_DT_NS};
use super::{AccelerationVector, MomentumGrid, SequenceTiming};

/// Interband loss above which a Bloch-oscillation run is flagged.
pub const LANDAU_ZENER_LIMIT: f64 = 0.05;

/// Output of [`adiabatic_load`].
#[derive(Clone, Debug)]
pub struct AdiabaticLoad {
    pub state: MomentumWavefunction,
    /// `|⟨n=0, q=0|ψ⟩|^2` at full depth.
    pub fidelity: f64,
}

/// Ramps the depth linearly from 0 to `config.depth` over `ramp_time_ms`,
/// starting from the plane wave at rest.
pub fn adiabatic_load(config: &LatticeConfig, ramp_time_ms: f64) -> Result<AdiabaticLoad> {
    adiabatic_load_with_step(config, ramp_time_ms, DEFAULT_DT_NS)
}

/// [`adiabatic_load`] with an explicit step size.
pub fn adiabatic_load_with_step(
    config: &LatticeConfig,
    ramp_time_ms: f64,
    dt_ns: f64,
) -> Result<AdiabaticLoad> {
    config.validate()?;
    if !ramp_time_ms.is_finite() || ramp_time_ms <= 0.0 {
        return Err(Error::InvalidInput(format!("ramp time must be positive, got {ramp_time_ms}")));
    }
    if !dt_ns.is_finite() || dt_ns <= 0.0 {
        return Err(Error::InvalidInput(format!("bad step {dt_ns} ns")));
    }
    let phys = &config.physical;
    let total = phys.micros_to_natural(ramp_time_ms * 1e3);
    let dt = phys.micros_to_natural(dt_ns * 1e-3);
    let (whole, rest) = step_plan(total, dt);
    let v0 = config.depth;
    let ramp = move |t_mid: f64| v0 * (t_mid / total).min(1.0);
    let steps = (0..whole)
        .map(|k| Step {
            dt,
            phase: 0.0,
            depth: ramp((k as f64 + 0.5) * dt),
        })
        .chain((rest > 0.0).then(|| Step {
            dt: rest,
            phase: 0.0,
            depth: ramp(whole as f64 * dt + 0.5 * rest),
        }));
    let mut state = MomentumWavefunction::plane_wave(0.0, config.truncation, 0)?;
    let mut evolver = Evolver::new(config.truncation);
    let dropped = evolve(&mut state, steps, 0.0, &mut evolver);
    check_leakage(&state, dropped)?;
    let ground = bloch_state(config, BlochIndex::ground())?;
    let fidelity = ground.inner(&state)?.norm_sqr();
    Ok(AdiabaticLoad { state, fidelity })
}

/// Populations sampled over hold times under a constant force.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct BlochSeries {
    pub accel_g: f64,
    pub hold_times_us: Vec<f64>,
    pub populations: Vec<PortPopulations>,
    /// Largest population found outside the ground band at any hold time.
    pub interband_loss: f64,
}

impl BlochSeries {
    pub fn landau_zener_flagged(&self) -> bool {
        self.interband_loss > LANDAU_ZENER_LIMIT
    }

    /// Time series of one port.
    pub fn port_series(&self, j: i32) -> Vec<f64> {
        self.populations.iter().map(|p| p.port(j)).collect()
    }
}

/// Holds the ground state in an unshaken lattice under acceleration `accel_g`
/// and records the port populations at every hold time.
pub fn simulate_bloch_oscillations(
    config: &LatticeConfig,
    accel_g: f64,
    hold_times_us: &[f64],
) -> Result<BlochSeries> {
    config.validate()?;
    check_accel(accel_g)?;
    if hold_times_us.iter().any(|t| !t.is_finite() || *t < 0.0) {
        return Err(Error::InvalidInput("hold times must be finite and non-negative".into()));
    }
    let phys = &config.physical;
    let dt = phys.micros_to_natural(DEFAULT_DT_NS * 1e-3);
    let drift = phys.drift_rate(accel_g);

    let mut order: Vec<usize> = (0..hold_times_us.len()).collect();
    order.sort_by(|&a, &b| hold_times_us[a].total_cmp(&hold_times_us[b]));

    let mut state = bloch_state(config, BlochIndex::ground())?;
    let mut evolver = Evolver::new(config.truncation);
    let mut dropped = 0.0;
    let mut now = 0.0;
    let mut interband_loss: f64 = 0.0;
    let mut populations = vec![PortPopulations::delta(0); hold_times_us.len()];
    for idx in order {
        let target = phys.micros_to_natural(hold_times_us[idx]);
        let (whole, rest) = step_plan(target - now, dt);
        let steps = std::iter::repeat_n(
            Step {
                dt,
                phase: 0.0,
                depth: config.depth,
            },
            whole,
        )
        .chain((rest > 0.0).then_some(Step {
            dt: rest,
            phase: 0.0,
            depth: config.depth,
        }));
        dropped += evolve(&mut state, steps, drift, &mut evolver);
        now = target.max(now);
        check_leakage(&state, dropped)?;
        populations[idx] = momentum_populations(&state)?;

        let spec = spectrum(config.depth, config.truncation, state.quasimomentum());
        let overlap: f64 = state
            .amplitudes()
            .iter()
            .zip(spec.vectors.column(0).iter())
            .map(|(c, v)| c * *v)
            .sum::<num_complex::Complex64>()
            .norm_sqr();
        interband_loss = interband_loss.max(1.0 - overlap);
    }
    Ok(BlochSeries {
        accel_g,
        hold_times_us: hold_times_us.to_vec(),
        populations,
        interband_loss,
    })
}

/// Diffraction of a condensate at rest by a lattice pulse of `pulse_time_us`.
pub fn simulate_kapitza_dirac(config: &LatticeConfig, pulse_time_us: f64) -> Result<PortPopulations> {
    config.validate()?;
    if !pulse_time_us.is_finite() || pulse_time_us < 0.0 {
        return Err(Error::InvalidInput(format!("bad pulse time {pulse_time_us}")));
    }
    let mut state = MomentumWavefunction::plane_wave(0.0, config.truncation, 0)?;
    let t = config.physical.micros_to_natural(pulse_time_us);
    if t > 0.0 {
        let mut evolver = Evolver::new(config.truncation);
        evolver.step(state.amplitudes_mut(), config.depth, 0.0, 0.0, t);
        check_leakage(&state, 0.0)?;
    }
    momentum_populations(&state)
}

/// Learned beamsplitter and mirror for one axis.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MichelsonComponents {
    pub beamsplitter: ControlWaveform,
    pub mirror: ControlWaveform,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stage {
    Initial,
    Beamsplitter,
    FirstPropagation,
    Mirror,
    SecondPropagation,
    Recombiner,
}

#[derive(Clone, Debug)]
pub struct StageSnapshot {
    pub stage: Stage,
    pub state: MomentumWavefunction,
    pub ports: PortPopulations,
}

/// Output of [`simulate_michelson_1d`].
#[derive(Clone, Debug)]
pub struct MichelsonRun {
    pub final_ports: PortPopulations,
    pub stages: Vec<StageSnapshot>,
    pub edge_leakage: f64,
}

impl MichelsonRun {
    pub fn stage(&self, stage: Stage) -> Option<&StageSnapshot> {
        self.stages.iter().find(|s| s.stage == stage)
    }
}

fn check_component(name: &str, w: &ControlWaveform, duration_us: f64) -> Result<()> {
    w.validate()?;
    let half = 0.5 * w.dt_ns * 1e-3;
    if (w.duration_us() - duration_us).abs() > half {
        return Err(Error::Timing(format!(
            "{name} waveform lasts {} us but the timing asks for {duration_us} us",
            w.duration_us()
        )));
    }
    Ok(())
}

/// Beamsplitter, propagation, mirror, propagation, then the time-reversed
/// beamsplitter as recombiner, all under constant acceleration.
///
/// The atoms start in the ground band of the lattice at the beamsplitter's
/// initial phase.
pub fn simulate_michelson_1d(
    config: &LatticeConfig,
    beamsplitter: &ControlWaveform,
    mirror: &ControlWaveform,
    accel_g: f64,
    timing: &SequenceTiming,
) -> Result<MichelsonRun> {
    config.validate()?;
    check_accel(accel_g)?;
    timing.validate()?;
    check_component("beamsplitter", beamsplitter, timing.beamsplitter_us)?;
    check_component("mirror", mirror, timing.mirror_us)?;
    if beamsplitter.dt_ns != mirror.dt_ns {
        return Err(Error::DtMismatch(beamsplitter.dt_ns, mirror.dt_ns));
    }
    if beamsplitter.is_empty() || mirror.is_empty() {
        return Err(Error::Timing("empty component waveform".into()));
    }

    let phys = &config.physical;
    let dt = phys.micros_to_natural(beamsplitter.dt_ns * 1e-3);
    let drift = phys.drift_rate(accel_g);
    let depth = config.depth;
    let recombiner: Vec<f64> = beamsplitter.samples.iter().rev().copied().collect();
    let (gap_steps, gap_rest) = step_plan(phys.micros_to_natural(timing.propagation_us), dt);

    let mut state = bloch_state(config, BlochIndex::ground())?.gauge_shifted(beamsplitter.samples[0]);
    let mut evolver = Evolver::new(config.truncation);
    let mut dropped = 0.0;
    let mut stages = Vec::with_capacity(6);
    let mut snapshot = |stage: Stage, s: &MomentumWavefunction| -> Result<()> {
        stages.push(StageSnapshot {
            stage,
            state: s.clone(),
            ports: momentum_populations(s)?,
        });
        Ok(())
    };
    snapshot(Stage::Initial, &state)?;

    let shaped = |samples: &[f64]| -> Vec<Step> {
        samples.iter().map(|&phase| Step { dt, phase, depth }).collect()
    };
    let hold = |phase: f64| -> Vec<Step> {
        let mut v = vec![Step { dt, phase, depth }; gap_steps];
        if gap_rest > 0.0 {
            v.push(Step {
                dt: gap_rest,
                phase,
                depth,
            });
        }
        v
    };

    dropped += evolve(&mut state, shaped(&beamsplitter.samples), drift, &mut evolver);
    snapshot(Stage::Beamsplitter, &state)?;
    dropped += evolve(&mut state, hold(*beamsplitter.samples.last().unwrap()), drift, &mut evolver);
    snapshot(Stage::FirstPropagation, &state)?;
    dropped += evolve(&mut state, shaped(&mirror.samples), drift, &mut evolver);
    snapshot(Stage::Mirror, &state)?;
    dropped += evolve(&mut state, hold(*mirror.samples.last().unwrap()), drift, &mut evolver);
    snapshot(Stage::SecondPropagation, &state)?;
    dropped += evolve(&mut state, shaped(&recombiner), drift, &mut evolver);
    snapshot(Stage::Recombiner, &state)?;

    let edge_leakage = check_leakage(&state, dropped)?;
    let final_ports = stages.last().unwrap().ports;
    Ok(MichelsonRun {
        final_ports,
        stages,
        edge_leakage,
    })
}

/// Separable 2D sequence: the outer product of independent x and z runs.
pub fn simulate_michelson_2d(
    config: &LatticeConfig,
    x: &MichelsonComponents,
    z: &MichelsonComponents,
    accel: AccelerationVector,
    timing: &SequenceTiming,
) -> Result<MomentumGrid> {
    let (rx, rz) = rayon::join(
        || simulate_michelson_1d(config, &x.beamsplitter, &x.mirror, accel.a_x, timing),
        || simulate_michelson_1d(config, &z.beamsplitter, &z.mirror, accel.a_z, timing),
    );
    let (rx, rz) = (rx?, rz?);
    Ok(MomentumGrid::from((&rx.final_ports, &rz.final_ports)))
}

/// Lattice, per-axis components and timing of the 2D interferometer.
#[derive(Clone, Debug)]
pub struct VectorInterferometer {
    pub lattice: LatticeConfig,
    pub x: MichelsonComponents,
    pub z: MichelsonComponents,
    pub timing: SequenceTiming,
}

impl VectorInterferometer {
    /// Uses the same components on both axes.
    pub fn symmetric(lattice: LatticeConfig, components: MichelsonComponents, timing: SequenceTiming) -> Self {
        Self {
            lattice,
            x: components.clone(),
            z: components,
            timing,
        }
    }

    pub fn grid(&self, accel: AccelerationVector) -> Result<MomentumGrid> {
        simulate_michelson_2d(&self.lattice, &self.x, &self.z, accel, &self.timing)
    }

    /// Output grids for many accelerations, in parallel.
    pub fn grids(&self, accels: &[AccelerationVector]) -> Result<Vec<MomentumGrid>> {
        accels.par_iter().map(|&a| self.grid(a)).collect()
    }
}

/// 1D Michelson port populations for many accelerations, in parallel.
pub fn michelson_scan(
    config: &LatticeConfig,
    components: &MichelsonComponents,
    accels_g: &[f64],
    timing: &SequenceTiming,
) -> Result<Vec<PortPopulations>> {
    accels_g
        .par_iter()
        .map(|&a| {
            simulate_michelson_1d(config, &components.beamsplitter, &components.mirror, a, timing)
                .map(|r| r.final_ports)
        })
        .collect()
}

//! Piecewise-constant exact propagation on the momentum ladder.
//!
//! Each step applies `exp(-i H(q, φ) dt)` with `H(q, φ) = G(φ) H(q, 0) G(φ)†`,
//! `G(φ) = diag(e^{i j φ})`, so a single real-symmetric eigendecomposition
//! per `(depth, q)` serves every phase.

use num_complex::Complex64;

use crate::error::{Error, Result};
use crate::lattice::{spectrum, LatticeConfig, MomentumWavefunction, Spectrum};

use super::waveform::ControlWaveform;

/// Ladder population (dropped plus edge) above which a run is rejected.
pub const LEAKAGE_LIMIT: f64 = 1e-3;

/// Step propagator with a one-entry eigendecomposition cache.
pub(crate) struct Evolver {
    truncation: usize,
    cached: Option<(f64, f64, Spectrum)>,
    phases_for_dt: Option<(f64, Vec<Complex64>)>,
    work: Vec<Complex64>,
    modes: Vec<Complex64>,
}

impl Evolver {
    pub fn new(truncation: usize) -> Self {
        let dim = 2 * truncation + 1;
        Self {
            truncation,
            cached: None,
            phases_for_dt: None,
            work: vec![Complex64::new(0.0, 0.0); dim],
            modes: vec![Complex64::new(0.0, 0.0); dim],
        }
    }

    fn ensure(&mut self, depth: f64, q: f64, dt: f64) {
        let hit = matches!(&self.cached, Some((d, qq, _)) if *d == depth && *qq == q);
        if !hit {
            self.cached = Some((depth, q, spectrum(depth, self.truncation, q)));
            self.phases_for_dt = None;
        }
        let fresh = matches!(&self.phases_for_dt, Some((t, _)) if *t == dt);
        if !fresh {
            let spec = &self.cached.as_ref().unwrap().2;
            let phases = spec
                .values
                .iter()
                .map(|&e| Complex64::from_polar(1.0, -e * dt))
                .collect();
            self.phases_for_dt = Some((dt, phases));
        }
    }

    /// `psi <- exp(-i H(q, phase) dt) psi`; a negative `dt` gives the adjoint step.
    pub fn step(&mut self, psi: &mut [Complex64], depth: f64, q: f64, phase: f64, dt: f64) {
        self.ensure(depth, q, dt);
        let spec = &self.cached.as_ref().unwrap().2;
        let phases = &self.phases_for_dt.as_ref().unwrap().1;
        let dim = psi.len();
        let j0 = self.truncation as f64;

        for (i, (w, p)) in self.work.iter_mut().zip(psi.iter()).enumerate() {
            *w = p * Complex64::from_polar(1.0, -(i as f64 - j0) * phase);
        }
        let v = &spec.vectors;
        for n in 0..dim {
            let col = v.column(n);
            let mut acc = Complex64::new(0.0, 0.0);
            for i in 0..dim {
                acc += self.work[i] * col[i];
            }
            self.modes[n] = acc * phases[n];
        }
        for (i, out) in psi.iter_mut().enumerate() {
            let mut acc = Complex64::new(0.0, 0.0);
            for n in 0..dim {
                acc += self.modes[n] * v[(i, n)];
            }
            *out = acc * Complex64::from_polar(1.0, (i as f64 - j0) * phase);
        }
    }
}

/// One piecewise-constant interval.
#[derive(Clone, Copy, Debug)]
pub(crate) struct Step {
    /// Duration in ħ/E_r.
    pub dt: f64,
    pub phase: f64,
    pub depth: f64,
}

/// Moves the state through `steps` while the quasimomentum drifts at `drift` (ħk per ħ/E_r).
///
/// Returns the probability dropped off the ladder edge by Bragg re-indexing.
pub(crate) fn evolve<I>(psi: &mut MomentumWavefunction, steps: I, drift: f64, evolver: &mut Evolver) -> f64
where
    I: IntoIterator<Item = Step>,
{
    let mut dropped = 0.0;
    for step in steps {
        let q = psi.quasimomentum();
        let q_mid = q + 0.5 * drift * step.dt;
        evolver.step(psi.amplitudes_mut(), step.depth, q_mid, step.phase, step.dt);
        let q_end = q + drift * step.dt;
        psi.set_quasimomentum(q_end);
        dropped += bragg_wrap(psi);
    }
    dropped
}

/// Folds the quasimomentum back into [-1, 1] by re-indexing the ladder.
pub(crate) fn bragg_wrap(psi: &mut MomentumWavefunction) -> f64 {
    let mut dropped = 0.0;
    loop {
        let q = psi.quasimomentum();
        if q > 1.0 {
            // q + 2j = (q - 2) + 2(j + 1)
            let amps = psi.amplitudes_mut();
            dropped += amps[amps.len() - 1].norm_sqr();
            amps.rotate_right(1);
            amps[0] = Complex64::new(0.0, 0.0);
            psi.set_quasimomentum(q - 2.0);
        } else if q < -1.0 {
            let amps = psi.amplitudes_mut();
            dropped += amps[0].norm_sqr();
            amps.rotate_left(1);
            let last = amps.len() - 1;
            amps[last] = Complex64::new(0.0, 0.0);
            psi.set_quasimomentum(q + 2.0);
        } else {
            return dropped;
        }
    }
}

pub(crate) fn edge_population(psi: &MomentumWavefunction) -> f64 {
    let a = psi.amplitudes();
    a[0].norm_sqr() + a[a.len() - 1].norm_sqr()
}

pub(crate) fn check_leakage(psi: &MomentumWavefunction, dropped: f64) -> Result<f64> {
    let leak = dropped + edge_population(psi);
    if leak > LEAKAGE_LIMIT {
        return Err(Error::Convergence(format!(
            "population {leak:.3e} reached the truncation edge; increase the truncation"
        )));
    }
    Ok(leak)
}

pub(crate) fn check_accel(accel_g: f64) -> Result<()> {
    if !accel_g.is_finite() {
        return Err(Error::NonFinite("acceleration"));
    }
    Ok(())
}

/// Result of [`propagate`].
#[derive(Clone, Debug)]
pub struct Propagated {
    pub state: MomentumWavefunction,
    /// The requested duration exceeded the waveform and its last sample was held.
    pub padded: bool,
    /// Probability lost at or beyond the ladder edges.
    pub edge_leakage: f64,
}

/// Splits `duration` (ħ/E_r) into whole steps of `dt` plus a remainder.
pub(crate) fn step_plan(duration: f64, dt: f64) -> (usize, f64) {
    let ratio = duration / dt;
    let mut whole = ratio.floor();
    if ratio - whole > 1.0 - 1e-9 {
        whole += 1.0;
    }
    let rest = (duration - whole * dt).max(0.0);
    let rest = if rest < dt * 1e-9 { 0.0 } else { rest };
    (whole as usize, rest)
}

/// Evolves `psi` under the shaken lattice for `duration_us` with a constant
/// acceleration `accel_g` (units of g) along the lattice axis.
///
/// The acceleration enters as comoving-frame quasimomentum drift; crossing the
/// zone edge re-indexes the ladder.
pub fn propagate(
    psi: &MomentumWavefunction,
    config: &LatticeConfig,
    waveform: &ControlWaveform,
    accel_g: f64,
    duration_us: f64,
) -> Result<Propagated> {
    config.validate()?;
    waveform.validate()?;
    check_accel(accel_g)?;
    if psi.dim() != config.dim() {
        return Err(Error::DimensionMismatch {
            expected: config.dim(),
            got: psi.dim(),
        });
    }
    if (psi.norm_sqr() - 1.0).abs() > 1e-9 {
        return Err(Error::InvalidInput("initial state is not normalized".into()));
    }
    if !duration_us.is_finite() || duration_us < 0.0 {
        return Err(Error::InvalidInput(format!("bad duration {duration_us} us")));
    }
    let phys = &config.physical;
    let dt = phys.micros_to_natural(waveform.dt_ns * 1e-3);
    let (whole, rest) = step_plan(phys.micros_to_natural(duration_us), dt);
    let used = whole + usize::from(rest > 0.0);
    let padded = used > waveform.len();

    let depth = config.depth;
    let steps = (0..whole)
        .map(|k| Step {
            dt,
            phase: waveform.phase_at(k),
            depth,
        })
        .chain((rest > 0.0).then(|| Step {
            dt: rest,
            phase: waveform.phase_at(whole),
            depth,
        }));
    let mut state = psi.clone();
    let mut evolver = Evolver::new(config.truncation);
    let dropped = evolve(&mut state, steps, phys.drift_rate(accel_g), &mut evolver);
    let edge_leakage = check_leakage(&state, dropped)?;
    Ok(Propagated {
        state,
        padded,
        edge_leakage,
    })
}

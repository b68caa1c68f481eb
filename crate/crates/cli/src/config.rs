//! Run configuration: a TOML file with a fixed schema.
//!
//! Every section is optional and falls back to the desk-scale defaults.
//! Unknown keys anywhere are rejected.

use std::path::{Path, PathBuf};

use bbi_core::control::{ControlBasis, OptimizerConfig, StepRule, REFERENCE_DESIGN_SEED};
use bbi_core::dynamics::{AccelerationVector, SequenceTiming, DEFAULT_DT_NS};
use bbi_core::estimation::{amplitude_scan, polar_scan, BlochFitConfig, SplineConfig, DEFAULT_RESOLUTION};
use bbi_core::imaging::DetectionModel;
use bbi_core::lattice::{LatticeConfig, PhysicalConfig, ATOMIC_MASS_UNIT, RB87_MASS_U, STANDARD_GRAVITY};
use serde::{Deserialize, Serialize};

use crate::CliError;

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    /// Master seed for detection noise.
    pub seed: u64,
    /// Output directory; `--out` takes precedence.
    pub out: Option<PathBuf>,
    pub lattice: LatticeSection,
    pub timing: TimingSection,
    pub waveforms: Option<WaveformSection>,
    pub detection: DetectionSection,
    pub bands: BandsSection,
    pub bloch: BlochSection,
    pub kapitza: KapitzaSection,
    pub qoc: QocSection,
    pub michelson: MichelsonSection,
    pub calibrate: CalibrateSection,
    pub estimate: EstimateSection,
    pub sensitivity: SensitivitySection,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LatticeSection {
    /// Depth in E_r.
    pub depth: f64,
    pub truncation: usize,
    pub wavelength_nm: f64,
    pub mass_u: f64,
    /// Value of g in m/s².
    pub gravity: f64,
}

impl Default for LatticeSection {
    fn default() -> Self {
        Self {
            depth: 10.0,
            truncation: bbi_core::lattice::DEFAULT_TRUNCATION,
            wavelength_nm: 1064.0,
            mass_u: RB87_MASS_U,
            gravity: STANDARD_GRAVITY,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TimingSection {
    pub beamsplitter_us: f64,
    pub mirror_us: f64,
    pub propagation_us: f64,
}

impl Default for TimingSection {
    fn default() -> Self {
        let t = SequenceTiming::desk_scale();
        Self {
            beamsplitter_us: t.beamsplitter_us,
            mirror_us: t.mirror_us,
            propagation_us: t.propagation_us,
        }
    }
}

/// Waveform files for the interferometer; the z axis reuses the x files unless given.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct WaveformSection {
    pub beamsplitter: PathBuf,
    pub mirror: PathBuf,
    #[serde(default)]
    pub beamsplitter_z: Option<PathBuf>,
    #[serde(default)]
    pub mirror_z: Option<PathBuf>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DetectionSection {
    pub n_trial: f64,
    pub gain_sigma: f64,
}

impl Default for DetectionSection {
    fn default() -> Self {
        Self {
            n_trial: 532.0,
            gain_sigma: 0.0,
        }
    }
}

/// A single acceleration or a scan, in units of g.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum AccelSpec {
    Single { a: [f64; 2] },
    AmplitudeScan { lo: f64, hi: f64, points: usize },
    PolarScan { magnitude: f64, steps: usize },
}

impl AccelSpec {
    pub fn accelerations(&self) -> bbi_core::Result<Vec<AccelerationVector>> {
        match *self {
            AccelSpec::Single { a } => Ok(vec![AccelerationVector::new(a[0], a[1])?]),
            AccelSpec::AmplitudeScan { lo, hi, points } => amplitude_scan(lo, hi, points),
            AccelSpec::PolarScan { magnitude, steps } => polar_scan(magnitude, steps),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BandsSection {
    pub q_points: usize,
    pub bands: usize,
}

impl Default for BandsSection {
    fn default() -> Self {
        Self { q_points: 101, bands: 5 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BlochSection {
    /// `[a_x, a_z]` in g.
    pub accel: [f64; 2],
    pub hold_max_us: f64,
    pub hold_step_us: f64,
    /// Noisy shots per hold time; ignored when `noise` is off.
    pub repeats: usize,
    pub noise: bool,
    pub harmonics: usize,
    pub min_r_squared: f64,
}

impl Default for BlochSection {
    fn default() -> Self {
        let fit = BlochFitConfig::default();
        Self {
            accel: [2.0, 2.0],
            hold_max_us: 2000.0,
            hold_step_us: 20.0,
            repeats: 5,
            noise: true,
            harmonics: fit.harmonics,
            min_r_squared: fit.min_r_squared,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct KapitzaSection {
    pub pulse_us: Vec<f64>,
}

impl Default for KapitzaSection {
    fn default() -> Self {
        Self {
            pulse_us: (0..=40).map(|i| 0.5 * f64::from(i)).collect(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct QocSection {
    /// Optimizer seed, separate from the noise seed.
    pub seed: u64,
    pub max_iterations: usize,
    pub fidelity_goal: f64,
    pub max_restarts: usize,
    pub init_amplitude: f64,
    pub dt_ns: f64,
    /// Band-limited sine basis with this many modes instead of free samples.
    pub fourier_modes: Option<usize>,
    /// Constant-step gradient ascent instead of quasi-Newton with backtracking.
    pub fixed_step: Option<f64>,
}

impl Default for QocSection {
    fn default() -> Self {
        let d = OptimizerConfig::default();
        Self {
            seed: REFERENCE_DESIGN_SEED,
            max_iterations: d.max_iterations,
            fidelity_goal: d.fidelity_goal,
            max_restarts: d.max_restarts,
            init_amplitude: d.init_amplitude,
            dt_ns: DEFAULT_DT_NS,
            fourier_modes: None,
            fixed_step: None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MichelsonSection {
    pub accel: AccelSpec,
}

impl Default for MichelsonSection {
    fn default() -> Self {
        Self {
            accel: AccelSpec::Single { a: [0.0, 0.0] },
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CalibrateSection {
    pub scan: AccelSpec,
    pub shots_per_point: usize,
    pub knot_spacing: f64,
    pub degree: usize,
    pub epsilon: f64,
}

impl Default for CalibrateSection {
    fn default() -> Self {
        let s = SplineConfig::default();
        Self {
            scan: AccelSpec::AmplitudeScan {
                lo: -0.2,
                hi: 0.2,
                points: 41,
            },
            shots_per_point: 10,
            knot_spacing: s.knot_spacing,
            degree: s.degree,
            epsilon: s.epsilon,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EstimateSection {
    /// Defaults to `model_x.json` in the output directory.
    pub model_x: Option<PathBuf>,
    pub model_z: Option<PathBuf>,
    pub accel: AccelSpec,
    pub shots: usize,
    /// Shot files to estimate instead of simulating.
    pub shot_files: Vec<PathBuf>,
    /// Use the exact grid as a single shot per point.
    pub noiseless: bool,
    pub posterior_csv: bool,
    pub resolution: usize,
}

impl Default for EstimateSection {
    fn default() -> Self {
        Self {
            model_x: None,
            model_z: None,
            accel: AccelSpec::Single { a: [-0.2, -0.2] },
            shots: 200,
            shot_files: Vec::new(),
            noiseless: false,
            posterior_csv: false,
            resolution: DEFAULT_RESOLUTION,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SensitivitySection {
    pub model_x: Option<PathBuf>,
    pub model_z: Option<PathBuf>,
    pub a: [f64; 2],
    pub n_atoms: f64,
    /// Shots behind the desk-scale baseline.
    pub shots: usize,
    pub times_ms: Vec<f64>,
}

impl Default for SensitivitySection {
    fn default() -> Self {
        Self {
            model_x: None,
            model_z: None,
            a: [-0.2, -0.2],
            n_atoms: 4e4,
            shots: 200,
            times_ms: vec![1.0, 2.0, 5.0, 10.0, 20.0, 50.0, 100.0],
        }
    }
}

fn bad(key: &str, msg: impl std::fmt::Display) -> CliError {
    CliError::Config(format!("{key}: {msg}"))
}

fn positive(key: &str, v: f64) -> Result<(), CliError> {
    if v.is_finite() && v > 0.0 {
        Ok(())
    } else {
        Err(bad(key, format!("must be positive, got {v}")))
    }
}

impl RunConfig {
    pub fn parse(text: &str) -> Result<Self, CliError> {
        toml::from_str(text).map_err(|e| CliError::Config(e.to_string()))
    }

    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::Config(format!("cannot read {}: {e}", path.display())))?;
        Self::parse(&text)
    }

    pub fn physical(&self) -> Result<PhysicalConfig, CliError> {
        let l = &self.lattice;
        PhysicalConfig::new(l.wavelength_nm * 1e-9, l.mass_u * ATOMIC_MASS_UNIT, l.gravity)
            .map_err(|e| bad("lattice", e))
    }

    pub fn lattice(&self) -> Result<LatticeConfig, CliError> {
        LatticeConfig::new(self.lattice.depth, self.lattice.truncation, self.physical()?).map_err(|e| bad("lattice", e))
    }

    pub fn timing(&self) -> Result<SequenceTiming, CliError> {
        let t = &self.timing;
        SequenceTiming::new(t.beamsplitter_us, t.mirror_us, t.propagation_us).map_err(|e| bad("timing", e))
    }

    pub fn detection(&self) -> Result<DetectionModel, CliError> {
        DetectionModel::new(self.detection.n_trial, self.detection.gain_sigma, self.seed).map_err(|e| bad("detection", e))
    }

    pub fn optimizer(&self) -> Result<OptimizerConfig, CliError> {
        let q = &self.qoc;
        let cfg = OptimizerConfig {
            max_iterations: q.max_iterations,
            fidelity_goal: q.fidelity_goal,
            step_rule: match q.fixed_step {
                Some(step) => StepRule::Fixed { step },
                None => StepRule::Backtracking,
            },
            seed: q.seed,
            basis: match q.fourier_modes {
                Some(modes) => ControlBasis::Fourier { modes },
                None => ControlBasis::Samples,
            },
            max_restarts: q.max_restarts,
            init_amplitude: q.init_amplitude,
            dt_ns: q.dt_ns,
            ..OptimizerConfig::default()
        };
        cfg.validate().map_err(|e| bad("qoc", e))?;
        Ok(cfg)
    }

    pub fn spline(&self) -> Result<SplineConfig, CliError> {
        let c = &self.calibrate;
        let s = SplineConfig {
            knot_spacing: c.knot_spacing,
            degree: c.degree,
            epsilon: c.epsilon,
        };
        s.validate().map_err(|e| bad("calibrate", e))?;
        Ok(s)
    }

    pub fn bloch_fit(&self) -> BlochFitConfig {
        BlochFitConfig {
            harmonics: self.bloch.harmonics,
            min_r_squared: self.bloch.min_r_squared,
            ..BlochFitConfig::default()
        }
    }

    /// Hold times `0, step, …` up to and including `hold_max_us`.
    pub fn hold_times(&self) -> Vec<f64> {
        let b = &self.bloch;
        let n = (b.hold_max_us / b.hold_step_us + 1e-9).floor() as usize;
        (0..=n).map(|i| b.hold_step_us * i as f64).collect()
    }

    /// Checks every section, whichever command runs.
    pub fn validate(&self) -> Result<(), CliError> {
        let lattice = self.lattice()?;
        self.timing()?;
        self.detection()?;
        self.optimizer()?;
        self.spline()?;

        let b = &self.bands;
        if b.q_points < 2 {
            return Err(bad("bands.q_points", "need at least two points"));
        }
        if b.bands == 0 || b.bands > lattice.dim() {
            return Err(bad("bands.bands", format!("must lie in 1..={}", lattice.dim())));
        }

        let bl = &self.bloch;
        if bl.accel.iter().any(|a| !a.is_finite()) {
            return Err(bad("bloch.accel", "must be finite"));
        }
        positive("bloch.hold_step_us", bl.hold_step_us)?;
        positive("bloch.hold_max_us", bl.hold_max_us)?;
        if bl.noise && bl.repeats == 0 {
            return Err(bad("bloch.repeats", "need at least one repeat with noise on"));
        }
        if bl.harmonics == 0 {
            return Err(bad("bloch.harmonics", "need at least one harmonic"));
        }
        if !(0.0..=1.0).contains(&bl.min_r_squared) {
            return Err(bad("bloch.min_r_squared", "must lie in [0, 1]"));
        }

        if self.kapitza.pulse_us.is_empty() || self.kapitza.pulse_us.iter().any(|t| !t.is_finite() || *t < 0.0) {
            return Err(bad("kapitza.pulse_us", "need one or more non-negative pulse times"));
        }

        self.michelson.accel.accelerations().map_err(|e| bad("michelson.accel", e))?;

        let c = &self.calibrate;
        c.scan.accelerations().map_err(|e| bad("calibrate.scan", e))?;
        if c.shots_per_point == 0 {
            return Err(bad("calibrate.shots_per_point", "must be at least 1"));
        }

        let e = &self.estimate;
        e.accel.accelerations().map_err(|err| bad("estimate.accel", err))?;
        if e.shots == 0 {
            return Err(bad("estimate.shots", "must be at least 1"));
        }
        if e.resolution < 3 {
            return Err(bad("estimate.resolution", "must be at least 3"));
        }

        let s = &self.sensitivity;
        if s.a.iter().any(|a| !a.is_finite()) {
            return Err(bad("sensitivity.a", "must be finite"));
        }
        positive("sensitivity.n_atoms", s.n_atoms)?;
        if s.shots == 0 {
            return Err(bad("sensitivity.shots", "must be at least 1"));
        }
        for &t in &s.times_ms {
            positive("sensitivity.times_ms", t)?;
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_file_gives_defaults() {
        let c = RunConfig::parse("").unwrap();
        assert_eq!(c, RunConfig::default());
        c.validate().unwrap();
        assert_eq!(c.hold_times().len(), 101);
    }

    #[test]
    fn unknown_keys_are_rejected() {
        let err = RunConfig::parse("[lattice]\ndepht = 3.0\n").unwrap_err().to_string();
        assert!(err.contains("depht"), "{err}");
        assert!(RunConfig::parse("colour = 1\n").is_err());
        assert!(RunConfig::parse("[estimate.accel]\nkind = \"single\"\na = [0.0, 0.0]\nb = 1\n").is_err());
    }

    #[test]
    fn acceleration_specs() {
        let c = RunConfig::parse(
            "[estimate.accel]\nkind = \"polar_scan\"\nmagnitude = 0.1\nsteps = 40\n\n\
             [michelson.accel]\nkind = \"amplitude_scan\"\nlo = -0.1\nhi = 0.1\npoints = 5\n",
        )
        .unwrap();
        assert_eq!(c.estimate.accel.accelerations().unwrap().len(), 40);
        assert_eq!(c.michelson.accel.accelerations().unwrap().len(), 5);
    }

    #[test]
    fn semantic_checks_name_the_key() {
        let c = RunConfig::parse("[bands]\nbands = 0\n").unwrap();
        let err = c.validate().unwrap_err().to_string();
        assert!(err.contains("bands.bands"), "{err}");
        let c = RunConfig::parse("[timing]\nmirror_us = -1.0\n").unwrap();
        assert!(c.validate().unwrap_err().to_string().contains("timing"));
    }
}

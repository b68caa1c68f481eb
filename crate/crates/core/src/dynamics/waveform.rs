//! Shaking waveforms and their plain-text file format.
//!
//! ```text
//! dt_ns=50
//! axis=x
//! 0
//! 0.125
//! ...
//! ```

use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Default sample interval of a shaking waveform, in nanoseconds.
pub const DEFAULT_DT_NS: f64 = 50.0;

/// Lattice axis a waveform drives.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Axis {
    X,
    Z,
}

impl Axis {
    pub fn label(self) -> &'static str {
        match self {
            Axis::X => "x",
            Axis::Z => "z",
        }
    }
}

impl std::str::FromStr for Axis {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim() {
            "x" | "X" => Ok(Axis::X),
            "z" | "Z" => Ok(Axis::Z),
            other => Err(Error::Parse(format!("unknown axis '{other}'"))),
        }
    }
}

/// Piecewise-constant lattice phase φ(t), one sample per `dt_ns`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ControlWaveform {
    pub dt_ns: f64,
    pub samples: Vec<f64>,
    pub axis: Axis,
}

impl ControlWaveform {
    pub fn new(dt_ns: f64, samples: Vec<f64>, axis: Axis) -> Result<Self> {
        let w = Self {
            dt_ns,
            samples,
            axis,
        };
        w.validate()?;
        Ok(w)
    }

    pub fn constant(dt_ns: f64, count: usize, value: f64, axis: Axis) -> Result<Self> {
        Self::new(dt_ns, vec![value; count], axis)
    }

    /// Constant waveform spanning `duration_us`, rounded to whole samples.
    pub fn constant_for(duration_us: f64, value: f64, axis: Axis) -> Result<Self> {
        let count = samples_for(duration_us, DEFAULT_DT_NS)?;
        Self::constant(DEFAULT_DT_NS, count, value, axis)
    }

    pub fn validate(&self) -> Result<()> {
        if !self.dt_ns.is_finite() || self.dt_ns <= 0.0 {
            return Err(Error::InvalidInput(format!("dt must be positive, got {}", self.dt_ns)));
        }
        if self.samples.iter().any(|s| !s.is_finite()) {
            return Err(Error::NonFinite("waveform sample"));
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn duration_us(&self) -> f64 {
        self.dt_ns * self.samples.len() as f64 * 1e-3
    }

    /// Phase applied during step `k`; past the end the last sample is held.
    pub fn phase_at(&self, k: usize) -> f64 {
        match self.samples.get(k) {
            Some(&p) => p,
            None => self.samples.last().copied().unwrap_or(0.0),
        }
    }

    pub fn to_text(&self) -> Result<String> {
        self.validate()?;
        if self.dt_ns.fract() != 0.0 {
            return Err(Error::InvalidInput(format!(
                "waveform files need an integer dt_ns, got {}",
                self.dt_ns
            )));
        }
        let mut out = String::with_capacity(24 * self.samples.len() + 32);
        let _ = writeln!(out, "dt_ns={}", self.dt_ns as u64);
        let _ = writeln!(out, "axis={}", self.axis.label());
        for s in &self.samples {
            let _ = writeln!(out, "{s}");
        }
        Ok(out)
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let mut dt_ns = None;
        let mut axis = None;
        let mut samples = Vec::new();
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            if let Some((key, value)) = line.split_once('=') {
                if !samples.is_empty() {
                    return Err(Error::Parse(format!("line {}: header after samples", lineno + 1)));
                }
                match key.trim() {
                    "dt_ns" => {
                        let v: u64 = value.trim().parse().map_err(|_| {
                            Error::Parse(format!("line {}: dt_ns must be an integer", lineno + 1))
                        })?;
                        dt_ns = Some(v as f64);
                    }
                    "axis" => axis = Some(value.parse::<Axis>()?),
                    other => {
                        return Err(Error::Parse(format!(
                            "line {}: unknown header key '{other}'",
                            lineno + 1
                        )))
                    }
                }
            } else {
                let v: f64 = line
                    .parse()
                    .map_err(|_| Error::Parse(format!("line {}: bad sample '{line}'", lineno + 1)))?;
                samples.push(v);
            }
        }
        let dt_ns = dt_ns.ok_or_else(|| Error::Parse("missing dt_ns header".into()))?;
        let axis = axis.ok_or_else(|| Error::Parse("missing axis header".into()))?;
        Self::new(dt_ns, samples, axis)
    }

    pub fn read(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_text(&std::fs::read_to_string(path)?)
    }

    pub fn write(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path, self.to_text()?)?;
        Ok(())
    }
}

/// Number of whole samples of `dt_ns` in `duration_us`.
pub fn samples_for(duration_us: f64, dt_ns: f64) -> Result<usize> {
    if !duration_us.is_finite() || duration_us < 0.0 {
        return Err(Error::InvalidInput(format!("bad duration {duration_us} us")));
    }
    let n = duration_us * 1e3 / dt_ns;
    let rounded = n.round();
    if (n - rounded).abs() > 1e-6 {
        return Err(Error::Timing(format!(
            "{duration_us} us is not a whole number of {dt_ns} ns samples"
        )));
    }
    Ok(rounded as usize)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn text_round_trip_is_exact() {
        let w = ControlWaveform::new(50.0, vec![0.0, 0.1, -2.5e-7, std::f64::consts::PI], Axis::Z)
            .unwrap();
        let back = ControlWaveform::from_text(&w.to_text().unwrap()).unwrap();
        assert_eq!(w, back);
    }

    #[test]
    fn rejects_malformed_files() {
        assert!(ControlWaveform::from_text("axis=x\n0.1\n").is_err());
        assert!(ControlWaveform::from_text("dt_ns=50\naxis=y\n0.1\n").is_err());
        assert!(ControlWaveform::from_text("dt_ns=50.5\naxis=x\n").is_err());
        assert!(ControlWaveform::from_text("dt_ns=50\naxis=x\nabc\n").is_err());
        assert!(ControlWaveform::from_text("dt_ns=50\naxis=x\nfoo=1\n").is_err());
        let w = ControlWaveform::from_text("# made by hand\ndt_ns=50\naxis=z\n0.5\n").unwrap();
        assert_eq!((w.axis, w.samples.as_slice()), (Axis::Z, &[0.5][..]));
        assert!(ControlWaveform::new(0.0, vec![], Axis::X).is_err());
        assert!(ControlWaveform::new(50.0, vec![f64::NAN], Axis::X).is_err());
    }

    #[test]
    fn sample_counts() {
        assert_eq!(samples_for(118.0, 50.0).unwrap(), 2360);
        assert!(samples_for(118.01, 50.0).is_err());
        let w = ControlWaveform::constant_for(236.0, 0.0, Axis::X).unwrap();
        assert!((w.duration_us() - 236.0).abs() < 1e-9);
        assert_eq!(w.phase_at(10_000), 0.0);
    }
}

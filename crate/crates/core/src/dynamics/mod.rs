//! Time evolution under lattice shaking and applied acceleration.

mod propagate;
mod sequences;
mod waveform;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::lattice::{PortPopulations, PORTS};

pub(crate) use propagate::Evolver;
pub use propagate::{propagate, Propagated, LEAKAGE_LIMIT};
pub use sequences::{
    adiabatic_load, adiabatic_load_with_step, michelson_scan, simulate_bloch_oscillations, simulate_kapitza_dirac, simulate_michelson_1d,
    simulate_michelson_2d, AdiabaticLoad, BlochSeries, MichelsonComponents, MichelsonRun, Stage, VectorInterferometer,
    StageSnapshot, LANDAU_ZENER_LIMIT,
};
pub use waveform::{samples_for, Axis, ControlWaveform, DEFAULT_DT_NS};

/// Applied acceleration in units of g.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct AccelerationVector {
    pub a_x: f64,
    pub a_z: f64,
}

impl AccelerationVector {
    pub fn new(a_x: f64, a_z: f64) -> Result<Self> {
        if !a_x.is_finite() || !a_z.is_finite() {
            return Err(Error::NonFinite("acceleration"));
        }
        Ok(Self { a_x, a_z })
    }

    /// `a_x = |a| cos θ`, `a_z = |a| sin θ`.
    pub fn polar(magnitude: f64, theta: f64) -> Self {
        Self {
            a_x: magnitude * theta.cos(),
            a_z: magnitude * theta.sin(),
        }
    }

    pub fn component(&self, axis: Axis) -> f64 {
        match axis {
            Axis::X => self.a_x,
            Axis::Z => self.a_z,
        }
    }
}

/// Durations (μs) of the Michelson stages.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SequenceTiming {
    pub beamsplitter_us: f64,
    pub mirror_us: f64,
    pub propagation_us: f64,
    pub total_us: f64,
}

impl SequenceTiming {
    pub fn new(beamsplitter_us: f64, mirror_us: f64, propagation_us: f64) -> Result<Self> {
        let t = Self {
            beamsplitter_us,
            mirror_us,
            propagation_us,
            total_us: 2.0 * beamsplitter_us + mirror_us + 2.0 * propagation_us,
        };
        t.validate()?;
        Ok(t)
    }

    /// 118 μs beamsplitter, 236 μs mirror, no propagation stages.
    pub fn desk_scale() -> Self {
        Self::new(118.0, 236.0, 0.0).expect("static timing")
    }

    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("beamsplitter", self.beamsplitter_us),
            ("mirror", self.mirror_us),
            ("propagation", self.propagation_us),
        ] {
            if !v.is_finite() || v < 0.0 {
                return Err(Error::Timing(format!("{name} duration {v} us is invalid")));
            }
        }
        if self.beamsplitter_us <= 0.0 || self.mirror_us <= 0.0 {
            return Err(Error::Timing("component durations must be positive".into()));
        }
        let expect = 2.0 * self.beamsplitter_us + self.mirror_us + 2.0 * self.propagation_us;
        if (expect - self.total_us).abs() > 1e-9 * expect.max(1.0) {
            return Err(Error::Timing(format!(
                "total {} us does not equal 2 x beamsplitter + mirror + 2 x propagation = {expect} us",
                self.total_us
            )));
        }
        Ok(())
    }
}

/// 7×7 port probabilities; rows are z-ports, columns x-ports, both ordered -6ħk..+6ħk.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MomentumGrid {
    pub probabilities: [[f64; PORTS]; PORTS],
}

impl MomentumGrid {
    pub fn new(probabilities: [[f64; PORTS]; PORTS]) -> Result<Self> {
        let g = Self { probabilities };
        g.validate()?;
        Ok(g)
    }

    /// Builds a grid from 49 row-major (z × x) entries.
    pub fn from_row_major(weights: &[f64]) -> Result<Self> {
        if weights.len() != PORTS * PORTS {
            return Err(Error::DimensionMismatch {
                expected: PORTS * PORTS,
                got: weights.len(),
            });
        }
        let mut probabilities = [[0.0; PORTS]; PORTS];
        for (i, w) in weights.iter().enumerate() {
            probabilities[i / PORTS][i % PORTS] = *w;
        }
        Self::new(probabilities)
    }

    pub fn validate(&self) -> Result<()> {
        let mut total = 0.0;
        for row in &self.probabilities {
            for &p in row {
                if !p.is_finite() || p < 0.0 {
                    return Err(Error::InvalidInput(format!("grid entry {p} is not a probability")));
                }
                total += p;
            }
        }
        if (total - 1.0).abs() > 1e-9 {
            return Err(Error::InvalidInput(format!("grid sums to {total}, not 1")));
        }
        Ok(())
    }

    /// `grid[z][x] = p_z[z] * p_x[x]`.
    pub fn outer(marginal_x: &[f64; PORTS], marginal_z: &[f64; PORTS]) -> Self {
        let mut probabilities = [[0.0; PORTS]; PORTS];
        for (row, pz) in probabilities.iter_mut().zip(marginal_z) {
            for (cell, px) in row.iter_mut().zip(marginal_x) {
                *cell = pz * px;
            }
        }
        Self { probabilities }
    }

    pub fn delta_center() -> Self {
        let mut probabilities = [[0.0; PORTS]; PORTS];
        probabilities[PORTS / 2][PORTS / 2] = 1.0;
        Self { probabilities }
    }

    pub fn row_major(&self) -> Vec<f64> {
        self.probabilities.iter().flatten().copied().collect()
    }

    pub fn center(&self) -> f64 {
        self.probabilities[PORTS / 2][PORTS / 2]
    }

    /// Mass with both momenta negative (ports -3..-1 on each axis).
    pub fn lower_left_mass(&self) -> f64 {
        self.probabilities[..3].iter().map(|r| r[..3].iter().sum::<f64>()).sum()
    }

    /// Mass with both momenta positive.
    pub fn upper_right_mass(&self) -> f64 {
        self.probabilities[4..].iter().map(|r| r[4..].iter().sum::<f64>()).sum()
    }

    pub fn max_abs_diff(&self, other: &Self) -> f64 {
        self.probabilities
            .iter()
            .flatten()
            .zip(other.probabilities.iter().flatten())
            .fold(0.0, |m, (a, b)| m.max((a - b).abs()))
    }
}

impl From<(&PortPopulations, &PortPopulations)> for MomentumGrid {
    fn from((x, z): (&PortPopulations, &PortPopulations)) -> Self {
        Self::outer(&x.probabilities, &z.probabilities)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn timing_total_is_enforced() {
        let t = SequenceTiming::desk_scale();
        assert_eq!(t.total_us, 472.0);
        let bad = SequenceTiming {
            total_us: 460.0,
            ..t
        };
        assert!(bad.validate().is_err());
        assert!(SequenceTiming::new(0.0, 236.0, 0.0).is_err());
    }

    #[test]
    fn grid_validation() {
        assert!(MomentumGrid::new([[0.0; PORTS]; PORTS]).is_err());
        let g = MomentumGrid::delta_center();
        assert!(g.validate().is_ok());
        assert_eq!(MomentumGrid::from_row_major(&g.row_major()).unwrap(), g);
        assert!(MomentumGrid::from_row_major(&[1.0]).is_err());
    }

    #[test]
    fn quadrants() {
        let mut u = [0.0; PORTS];
        u[0] = 0.6;
        u[6] = 0.4;
        let g = MomentumGrid::outer(&u, &u);
        assert!((g.lower_left_mass() - 0.36).abs() < 1e-15);
        assert!((g.upper_right_mass() - 0.16).abs() < 1e-15);
    }
}

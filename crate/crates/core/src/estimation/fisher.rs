//! Classical Fisher information of the empirical model and derived bounds.

use serde::{Deserialize, Serialize};

use super::model::{EmpiricalModel, ModelPair};
use crate::dynamics::AccelerationVector;
use crate::error::{Error, Result};
use crate::numeric::neumaier_sum;

/// `I(a) = Σ_m (∂p_m/∂a)^2 / p_m` for one axis.
pub fn fisher_information(model: &EmpiricalModel, a: f64) -> Result<f64> {
    let p = model.probabilities(a)?;
    let d = model.derivatives(a)?;
    Ok(neumaier_sum(p.iter().zip(&d).map(|(p, d)| d * d / p)))
}

/// Per-axis information per trial and the resulting standard deviations.
///
/// Bounds are `f64::INFINITY` where the information vanishes.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct FisherBound {
    pub at: AccelerationVector,
    /// Information per trial, `[x, z]`, in 1/g².
    pub information: [f64; 2],
    /// `1/√I` per axis.
    pub sigma_single: [f64; 2],
    pub n_atoms: f64,
    /// `1/√(N I)` per axis.
    pub sigma_n: [f64; 2],
}

impl FisherBound {
    pub fn sigma_for(&self, n: f64) -> [f64; 2] {
        self.information.map(|i| bound(i, n))
    }
}

fn bound(information: f64, n: f64) -> f64 {
    if information > 0.0 {
        1.0 / (n * information).sqrt()
    } else {
        f64::INFINITY
    }
}

pub fn fisher_bound(models: &ModelPair, a: AccelerationVector, n_atoms: f64) -> Result<FisherBound> {
    if !(n_atoms.is_finite() && n_atoms > 0.0) {
        return Err(Error::InvalidInput(format!("atom number must be positive, got {n_atoms}")));
    }
    let information = [fisher_information(&models.x, a.a_x)?, fisher_information(&models.z, a.a_z)?];
    Ok(FisherBound {
        at: a,
        information,
        sigma_single: information.map(|i| bound(i, 1.0)),
        n_atoms,
        sigma_n: information.map(|i| bound(i, n_atoms)),
    })
}

/// One row of the interrogation-time projection.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScalingRow {
    pub time_ms: f64,
    pub delta_a: f64,
}

/// Projects `delta_a ∝ 1/T²` from a measured baseline.
pub fn scaling_projection(baseline_ms: f64, baseline_delta_a: f64, times_ms: &[f64]) -> Result<Vec<ScalingRow>> {
    if !(baseline_ms.is_finite() && baseline_ms > 0.0) {
        return Err(Error::InvalidInput(format!("bad baseline time {baseline_ms} ms")));
    }
    if baseline_delta_a.is_nan() || baseline_delta_a < 0.0 {
        return Err(Error::InvalidInput(format!("bad baseline sensitivity {baseline_delta_a}")));
    }
    times_ms
        .iter()
        .map(|&t| {
            if !(t.is_finite() && t > 0.0) {
                return Err(Error::InvalidInput(format!("bad projection time {t} ms")));
            }
            Ok(ScalingRow {
                time_ms: t,
                delta_a: baseline_delta_a * (baseline_ms / t).powi(2),
            })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dynamics::Axis;
    use crate::estimation::model::build_model_from_points;
    use crate::estimation::SplineConfig;
    use crate::lattice::PORTS;
    use approx::assert_relative_eq;

    #[test]
    fn constant_model_has_no_information() {
        let flat = EmpiricalModel::constant(Axis::X, [1.0 / 7.0; PORTS], [-0.2, 0.2], 1e-4).unwrap();
        let pair = ModelPair {
            x: flat.clone(),
            z: EmpiricalModel { axis: Axis::Z, ..flat },
        };
        let b = fisher_bound(&pair, AccelerationVector::default(), 4e4).unwrap();
        assert_eq!(b.information, [0.0, 0.0]);
        assert!(b.sigma_single.iter().all(|s| s.is_infinite()));
    }

    #[test]
    fn two_channel_toy() {
        // p = (a, 1 - a) on [0.1, 0.9] gives I = 1/(a(1-a)) up to the ε mixing.
        let pts: Vec<(f64, [f64; PORTS])> = (0..=40)
            .map(|i| {
                let a = 0.1 + 0.02 * i as f64;
                let mut w = [0.0; PORTS];
                w[0] = a;
                w[1] = 1.0 - a;
                (a, w)
            })
            .collect();
        let cfg = SplineConfig {
            epsilon: 1e-12,
            knot_spacing: 0.1,
            ..Default::default()
        };
        let m = build_model_from_points(&pts, Axis::X, &cfg).unwrap();
        for a in [0.2, 0.5, 0.77] {
            let i = fisher_information(&m, a).unwrap();
            // The five floored channels contribute nothing; the scale (1 - 7ε) is negligible.
            assert_relative_eq!(i, 1.0 / (a * (1.0 - a)), max_relative = 1e-6);
        }
    }

    #[test]
    fn atom_number_scaling() {
        let pts: Vec<(f64, [f64; PORTS])> = (0..=40)
            .map(|i| {
                let a = -0.2 + 0.01 * i as f64;
                let mut w = [0.1; PORTS];
                w[0] = 0.2 + a;
                w[1] = 0.2 - a;
                let s: f64 = w.iter().sum();
                (a, w.map(|v| v / s))
            })
            .collect();
        let m = build_model_from_points(&pts, Axis::X, &SplineConfig::default()).unwrap();
        let pair = ModelPair {
            x: m.clone(),
            z: EmpiricalModel { axis: Axis::Z, ..m },
        };
        let b = fisher_bound(&pair, AccelerationVector::new(-0.1, 0.05).unwrap(), 4e4).unwrap();
        for k in 0..2 {
            assert_relative_eq!(b.sigma_single[k] / b.sigma_n[k], 200.0, max_relative = 1e-12);
        }
    }

    #[test]
    fn projection_is_inverse_square() {
        let rows = scaling_projection(0.472, 1e-4, &[0.472, 1.888, 100.0]).unwrap();
        assert_relative_eq!(rows[0].delta_a, 1e-4);
        assert_relative_eq!(rows[1].delta_a, 1e-4 / 16.0, max_relative = 1e-14);
        assert!(scaling_projection(0.0, 1e-4, &[1.0]).is_err());
    }
}

//! Acceleration estimation from momentum-port populations.
//!
//! Calibration shots are turned into smooth per-axis response curves
//! `p_m(a)`, which feed a least-squares inversion, a grid Bayesian posterior
//! and Fisher-information bounds. The Bloch-period fit works directly on
//! oscillation time series.

mod bayes;
mod bloch_fit;
mod closed_loop;
mod fisher;
mod model;
mod spline;
mod trials;

use serde::{Deserialize, Serialize};

use crate::dynamics::AccelerationVector;
use crate::error::{Error, Result};
use crate::numeric::linear_fit;

pub use bayes::{
    bayes_update, marginal_counts, posterior_stats, Posterior, PosteriorAccumulator, PosteriorStats, DEFAULT_RESOLUTION,
};
pub use bloch_fit::{fit_bloch_period, BlochFit, BlochFitConfig};
pub use closed_loop::{
    amplitude_scan, closed_loop_scan, estimate_shots, polar_scan, posterior_contraction, simulate_calibration,
    simulate_shots, ContractionRow, ScanPoint,
};
pub use fisher::{fisher_bound, fisher_information, scaling_projection, FisherBound, ScalingRow};
pub use model::{
    build_empirical_model, build_model_from_points, channel_label, least_squares_axis, least_squares_estimate,
    marginalize, shot_marginals, AxisEstimate, CalibrationEntry, CalibrationSet, EmpiricalModel, LeastSquaresEstimate,
    ModelPair, SplineConfig, LS_SCAN_POINTS,
};
pub use spline::BSplineBasis;
pub use trials::{estimate_n_trial, TrialConfig, TrialEstimate, TrialPoint};

/// Magnitude and direction of an acceleration vector.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Polar {
    pub magnitude: f64,
    /// Angle from the +x axis towards +z, radians in (-π, π].
    pub theta: f64,
    /// Set when the vector is exactly zero and `theta` carries no information.
    pub zero: bool,
}

pub fn magnitude_angle(a: &AccelerationVector) -> Polar {
    let zero = a.a_x == 0.0 && a.a_z == 0.0;
    Polar {
        magnitude: a.a_x.hypot(a.a_z),
        theta: if zero { 0.0 } else { a.a_z.atan2(a.a_x) },
        zero,
    }
}

/// Log-log slope of posterior width against shot number; `-0.5` for shot-noise contraction.
pub fn contraction_exponent(shots: &[usize], delta_a: &[f64]) -> Result<f64> {
    if shots.len() != delta_a.len() {
        return Err(Error::DimensionMismatch {
            expected: shots.len(),
            got: delta_a.len(),
        });
    }
    if shots.len() < 2 || shots.iter().any(|&k| k == 0) || delta_a.iter().any(|d| !(d.is_finite() && *d > 0.0)) {
        return Err(Error::InsufficientData("need two or more positive (k, delta_a) pairs".into()));
    }
    let x: Vec<f64> = shots.iter().map(|&k| (k as f64).ln()).collect();
    let y: Vec<f64> = delta_a.iter().map(|d| d.ln()).collect();
    Ok(linear_fit(&x, &y).0)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    #[test]
    fn polar_form() {
        let p = magnitude_angle(&AccelerationVector { a_x: -0.2, a_z: -0.2 });
        assert_relative_eq!(p.magnitude, 0.2 * 2f64.sqrt());
        assert_relative_eq!(p.theta, -0.75 * std::f64::consts::PI);
        assert!(!p.zero);
        let z = magnitude_angle(&AccelerationVector::default());
        assert!(z.zero && z.theta == 0.0);
    }

    #[test]
    fn inverse_square_root_contraction() {
        let ks = [10, 20, 50, 100, 200];
        let d: Vec<f64> = ks.iter().map(|&k| 3e-3 / (k as f64).sqrt()).collect();
        assert_relative_eq!(contraction_exponent(&ks, &d).unwrap(), -0.5, max_relative = 1e-12);
        assert!(contraction_exponent(&[10], &[1.0]).is_err());
    }
}

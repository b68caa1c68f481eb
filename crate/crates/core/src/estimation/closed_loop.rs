//! Synthetic calibration and closed-loop estimation runs.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::bayes::{posterior_stats, PosteriorAccumulator};
use super::fisher::fisher_bound;
use super::model::{least_squares_estimate, shot_marginals, CalibrationEntry, CalibrationSet, ModelPair};
use crate::dynamics::{AccelerationVector, VectorInterferometer};
use crate::error::{Error, Result};
use crate::imaging::{sample_shots, sub_seed, DetectionModel, ShotRecord};
use crate::numeric::mean_var;

/// `points` accelerations with `a_x = a_z` evenly spaced over `[lo, hi]`.
pub fn amplitude_scan(lo: f64, hi: f64, points: usize) -> Result<Vec<AccelerationVector>> {
    if points < 2 || !(lo.is_finite() && hi.is_finite() && hi > lo) {
        return Err(Error::InvalidInput(format!(
            "amplitude scan needs lo < hi and two or more points, got [{lo}, {hi}] x {points}"
        )));
    }
    (0..points)
        .map(|i| {
            let a = lo + (hi - lo) * i as f64 / (points - 1) as f64;
            AccelerationVector::new(a, a)
        })
        .collect()
}

/// `steps` directions at fixed magnitude, `θ_k = 2πk / steps`.
pub fn polar_scan(magnitude: f64, steps: usize) -> Result<Vec<AccelerationVector>> {
    if steps == 0 || !(magnitude.is_finite() && magnitude >= 0.0) {
        return Err(Error::InvalidInput(format!("bad polar scan |a| = {magnitude}, {steps} steps")));
    }
    Ok((0..steps)
        .map(|k| AccelerationVector::polar(magnitude, 2.0 * std::f64::consts::PI * k as f64 / steps as f64))
        .collect())
}

/// Shots at every acceleration; point `i` draws from the sub-seed stream `i`.
pub fn simulate_shots(
    ifo: &VectorInterferometer,
    accels: &[AccelerationVector],
    detection: &DetectionModel,
    shots_per_point: usize,
) -> Result<Vec<Vec<ShotRecord>>> {
    detection.validate()?;
    let grids = ifo.grids(accels)?;
    grids
        .par_iter()
        .enumerate()
        .map(|(i, g)| sample_shots(g, &detection.with_seed(sub_seed(detection.seed, i as u64)), shots_per_point))
        .collect()
}

pub fn simulate_calibration(
    ifo: &VectorInterferometer,
    accels: &[AccelerationVector],
    detection: &DetectionModel,
    shots_per_point: usize,
) -> Result<CalibrationSet> {
    if shots_per_point == 0 {
        return Err(Error::InvalidInput("calibration needs at least one shot per point".into()));
    }
    let shots = simulate_shots(ifo, accels, detection, shots_per_point)?;
    let set = CalibrationSet {
        entries: accels
            .iter()
            .zip(shots)
            .map(|(&accel, shots)| CalibrationEntry { accel, shots })
            .collect(),
    };
    set.validate()?;
    Ok(set)
}

/// Least-squares estimates at one applied acceleration.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScanPoint {
    pub applied: AccelerationVector,
    pub estimates: Vec<AccelerationVector>,
    pub mean: AccelerationVector,
    /// Sample standard deviation of the per-shot estimates.
    pub delta_a: [f64; 2],
}

impl ScanPoint {
    pub fn residual(&self) -> [f64; 2] {
        [self.mean.a_x - self.applied.a_x, self.mean.a_z - self.applied.a_z]
    }

    /// `|residual| ≤ k δa` on both axes.
    pub fn within(&self, k: f64) -> bool {
        self.residual().iter().zip(&self.delta_a).all(|(r, d)| r.abs() <= k * d)
    }
}

fn summarize(applied: AccelerationVector, estimates: Vec<AccelerationVector>) -> ScanPoint {
    let xs: Vec<f64> = estimates.iter().map(|e| e.a_x).collect();
    let zs: Vec<f64> = estimates.iter().map(|e| e.a_z).collect();
    let (mx, vx) = mean_var(&xs);
    let (mz, vz) = mean_var(&zs);
    ScanPoint {
        applied,
        estimates,
        mean: AccelerationVector { a_x: mx, a_z: mz },
        delta_a: [vx.sqrt(), vz.sqrt()],
    }
}

/// Per-shot least-squares estimation of given shots.
pub fn estimate_shots(applied: AccelerationVector, shots: &[ShotRecord], models: &ModelPair) -> Result<ScanPoint> {
    let estimates = shots
        .iter()
        .map(|s| {
            let (mx, mz) = shot_marginals(s)?;
            least_squares_estimate((&mx, &mz), models).map(|e| e.accel)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(summarize(applied, estimates))
}

/// Simulate, sample and estimate every point of a scan.
pub fn closed_loop_scan(
    ifo: &VectorInterferometer,
    accels: &[AccelerationVector],
    models: &ModelPair,
    detection: &DetectionModel,
    shots_per_point: usize,
) -> Result<Vec<ScanPoint>> {
    if shots_per_point < 2 {
        return Err(Error::InvalidInput("closed-loop points need at least two shots".into()));
    }
    let shots = simulate_shots(ifo, accels, detection, shots_per_point)?;
    accels
        .par_iter()
        .zip(shots.par_iter())
        .map(|(&a, s)| estimate_shots(a, s, models))
        .collect()
}

/// Posterior width after `shots` shots next to the Cramér-Rao bound.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ContractionRow {
    pub shots: usize,
    pub mean: AccelerationVector,
    pub delta_a: [f64; 2],
    /// `1/√(k n_trial I(a))` per axis.
    pub crb: [f64; 2],
    /// Spread of posterior means over disjoint subsets of `shots` shots; NaN if fewer than two fit.
    pub subset_spread: [f64; 2],
    pub subsets: usize,
}

fn posterior_of(models: &ModelPair, n_trial: f64, shots: &[ShotRecord]) -> Result<(AccelerationVector, [f64; 2])> {
    let mut acc = PosteriorAccumulator::new(models.clone(), n_trial, super::bayes::DEFAULT_RESOLUTION)?;
    for s in shots {
        acc.add(s)?;
    }
    let stats = posterior_stats(&acc.posterior()?);
    Ok((stats.mean, stats.std))
}

/// Posterior contraction over the first `k` shots of `pool` for each `k`,
/// with the spread of posterior means over at most `max_subsets` disjoint
/// subsets of the pool.
pub fn posterior_contraction(
    models: &ModelPair,
    pool: &[ShotRecord],
    n_trial: f64,
    truth: AccelerationVector,
    ks: &[usize],
    max_subsets: usize,
) -> Result<Vec<ContractionRow>> {
    if ks.iter().any(|&k| k == 0 || k > pool.len()) {
        return Err(Error::InvalidInput(format!(
            "shot counts must lie in 1..={}, got {ks:?}",
            pool.len()
        )));
    }
    let info = fisher_bound(models, truth, n_trial)?;
    ks.par_iter()
        .map(|&k| {
            let (mean, delta_a) = posterior_of(models, n_trial, &pool[..k])?;
            let subsets = (pool.len() / k).min(max_subsets);
            let means = (0..subsets)
                .into_par_iter()
                .map(|i| posterior_of(models, n_trial, &pool[i * k..(i + 1) * k]).map(|r| r.0))
                .collect::<Result<Vec<_>>>()?;
            let spread = if subsets >= 2 {
                let xs: Vec<f64> = means.iter().map(|m| m.a_x).collect();
                let zs: Vec<f64> = means.iter().map(|m| m.a_z).collect();
                [mean_var(&xs).1.sqrt(), mean_var(&zs).1.sqrt()]
            } else {
                [f64::NAN; 2]
            };
            Ok(ContractionRow {
                shots: k,
                mean,
                delta_a,
                crb: info.sigma_for(n_trial * k as f64),
                subset_spread: spread,
                subsets,
            })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    #[test]
    fn scans() {
        let a = amplitude_scan(-0.2, 0.2, 41).unwrap();
        assert_eq!(a.len(), 41);
        assert_relative_eq!(a[20].a_x, 0.0, epsilon = 1e-15);
        assert_eq!((a[0].a_x, a[40].a_z), (-0.2, 0.2));
        let p = polar_scan(0.1, 40).unwrap();
        assert_relative_eq!(p[10].a_z, 0.1, max_relative = 1e-12);
        assert!(p.iter().all(|v| (v.a_x.hypot(v.a_z) - 0.1).abs() < 1e-15));
        assert!(amplitude_scan(0.1, 0.1, 5).is_err());
    }
}

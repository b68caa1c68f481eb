//! Effective multinomial trial number from shot-to-shot bin fluctuations.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::imaging::{ShotRecord, BINS};
use crate::numeric::{mean_var, neumaier_sum};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrialConfig {
    /// Bins whose mean weight falls below this are left out of the fit.
    pub min_probability: f64,
    /// Estimates above this are reported as the cap with a flag.
    pub cap: f64,
}

impl Default for TrialConfig {
    fn default() -> Self {
        Self {
            min_probability: 0.01,
            cap: 1e9,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrialPoint {
    pub shots: usize,
    pub n_trial: f64,
    pub capped: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrialEstimate {
    pub n_trial: f64,
    pub capped: bool,
    pub bins_used: usize,
    /// Estimate after the first k shots, for k = 3..=len.
    pub trace: Vec<TrialPoint>,
}

/// `(1/N, bins used)` from the first `shots.len()` records.
///
/// Fits `v_b = p_b (1 - p_b) / N` by weighted least squares with weights
/// `1 / (p_b (1 - p_b))^2`, which makes `1/N` the mean of `v_b / (p_b (1 - p_b))`.
fn inverse_trials(shots: &[ShotRecord], config: &TrialConfig) -> (f64, usize) {
    let mut ratios = Vec::with_capacity(BINS);
    let mut column = Vec::with_capacity(shots.len());
    for b in 0..BINS {
        column.clear();
        column.extend(shots.iter().map(|s| s.weights[b]));
        let (p, v) = mean_var(&column);
        if p < config.min_probability || p > 1.0 - config.min_probability {
            continue;
        }
        ratios.push(v / (p * (1.0 - p)));
    }
    if ratios.is_empty() {
        return (0.0, 0);
    }
    (neumaier_sum(ratios.iter().copied()) / ratios.len() as f64, ratios.len())
}

fn finish(x: f64, cap: f64) -> (f64, bool) {
    if x > 0.0 && 1.0 / x <= cap {
        (1.0 / x, false)
    } else {
        (cap, true)
    }
}

pub fn estimate_n_trial(shots: &[ShotRecord], config: &TrialConfig) -> Result<TrialEstimate> {
    if shots.len() < 3 {
        return Err(Error::InsufficientData(format!("need at least 3 shots, got {}", shots.len())));
    }
    for s in shots {
        s.validate()?;
    }
    if !(config.cap > 0.0 && config.min_probability >= 0.0 && config.min_probability < 0.5) {
        return Err(Error::InvalidInput("bad trial-estimation configuration".into()));
    }
    let (x, bins_used) = inverse_trials(shots, config);
    if bins_used == 0 {
        return Err(Error::InsufficientData("no bin is populated enough to estimate fluctuations".into()));
    }
    let trace = (3..=shots.len())
        .map(|k| {
            let (xk, _) = inverse_trials(&shots[..k], config);
            let (n_trial, capped) = finish(xk, config.cap);
            TrialPoint {
                shots: k,
                n_trial,
                capped,
            }
        })
        .collect();
    let (n_trial, capped) = finish(x, config.cap);
    Ok(TrialEstimate {
        n_trial,
        capped,
        bins_used,
        trace,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dynamics::MomentumGrid;
    use crate::imaging::{sample_shots, DetectionModel};

    fn spread_grid() -> MomentumGrid {
        let u = [0.05, 0.1, 0.2, 0.3, 0.2, 0.1, 0.05];
        MomentumGrid::outer(&u, &u)
    }

    #[test]
    fn recovers_trial_numbers() {
        for (n, seed) in [(532.0, 1u64), (100.0, 2)] {
            let shots = sample_shots(&spread_grid(), &DetectionModel::new(n, 0.0, seed).unwrap(), 200).unwrap();
            let est = estimate_n_trial(&shots, &TrialConfig::default()).unwrap();
            assert!((est.n_trial / n - 1.0).abs() < 0.1, "{} vs {n}", est.n_trial);
            assert_eq!(est.trace.len(), 198);
            assert!(!est.capped);
        }
    }

    #[test]
    fn identical_shots_are_capped() {
        let shot = ShotRecord::from_grid(&spread_grid(), 0);
        let est = estimate_n_trial(&vec![shot; 10], &TrialConfig::default()).unwrap();
        assert!(est.capped);
        assert_eq!(est.n_trial, 1e9);
    }

    #[test]
    fn needs_three_shots() {
        let shot = ShotRecord::from_grid(&spread_grid(), 0);
        assert!(estimate_n_trial(&[shot.clone(), shot], &TrialConfig::default()).is_err());
    }
}

//! Bloch-period fit of port-population time series.
//!
//! Every selected port is modelled as `c_0 + Σ_h a_h cos(hωt) + b_h sin(hωt)`
//! with a shared `ω`. The linear coefficients are projected out, `ω` is found
//! by a single-harmonic scan then refined with all harmonics, and its standard
//! error comes from the Gauss-Newton covariance.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::lattice::{PhysicalConfig, PORTS, PORT_REACH};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BlochFitConfig {
    pub ports: Vec<i32>,
    pub harmonics: usize,
    /// Minimum coefficient of determination for an oscillation to count as detected.
    pub min_r_squared: f64,
}

impl Default for BlochFitConfig {
    fn default() -> Self {
        Self {
            ports: vec![-1, 0, 1],
            harmonics: 3,
            min_r_squared: 0.5,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct BlochFit {
    /// Magnitude of the acceleration in g.
    pub accel_g: f64,
    pub sigma_g: f64,
    pub period_us: f64,
    pub sigma_period_us: f64,
    pub r_squared: f64,
}

struct Problem<'a> {
    times: &'a [f64],
    ys: Vec<Vec<f64>>,
}

impl Problem<'_> {
    fn design(&self, omega: f64, harmonics: usize) -> DMatrix<f64> {
        let mut x = DMatrix::zeros(self.times.len(), 2 * harmonics + 1);
        for (i, &t) in self.times.iter().enumerate() {
            x[(i, 0)] = 1.0;
            for h in 1..=harmonics {
                let (s, c) = (h as f64 * omega * t).sin_cos();
                x[(i, 2 * h - 1)] = c;
                x[(i, 2 * h)] = s;
            }
        }
        x
    }

    /// Linear coefficients per port and the total residual sum of squares.
    fn project(&self, omega: f64, harmonics: usize) -> Option<(Vec<DVector<f64>>, f64)> {
        let x = self.design(omega, harmonics);
        let xtx = x.transpose() * &x;
        let chol = xtx.cholesky()?;
        let mut rss = 0.0;
        let mut betas = Vec::with_capacity(self.ys.len());
        for y in &self.ys {
            let y = DVector::from_column_slice(y);
            let beta = chol.solve(&(x.transpose() * &y));
            rss += (&y - &x * &beta).norm_squared();
            betas.push(beta);
        }
        Some((betas, rss))
    }

    fn rss(&self, omega: f64, harmonics: usize) -> f64 {
        self.project(omega, harmonics).map_or(f64::INFINITY, |(_, r)| r)
    }
}

fn golden_min(f: impl Fn(f64) -> f64, mut lo: f64, mut hi: f64) -> f64 {
    let g = 0.5 * (5f64.sqrt() - 1.0);
    let mut a = hi - g * (hi - lo);
    let mut b = lo + g * (hi - lo);
    let (mut fa, mut fb) = (f(a), f(b));
    for _ in 0..200 {
        if hi - lo < 1e-13 * hi.abs().max(1.0) {
            break;
        }
        if fa < fb {
            hi = b;
            b = a;
            fb = fa;
            a = hi - g * (hi - lo);
            fa = f(a);
        } else {
            lo = a;
            a = b;
            fa = fb;
            b = lo + g * (hi - lo);
            fb = f(b);
        }
    }
    0.5 * (lo + hi)
}

/// Fits the oscillation period of `series` (one 7-port vector per hold time, μs).
pub fn fit_bloch_period(
    hold_times_us: &[f64],
    series: &[[f64; PORTS]],
    config: &BlochFitConfig,
    physical: &PhysicalConfig,
) -> Result<BlochFit> {
    if hold_times_us.len() != series.len() {
        return Err(Error::DimensionMismatch {
            expected: hold_times_us.len(),
            got: series.len(),
        });
    }
    if config.ports.is_empty() || config.ports.iter().any(|j| j.abs() > PORT_REACH) {
        return Err(Error::InvalidInput("fit ports must lie in -3..=3".into()));
    }
    if config.harmonics == 0 {
        return Err(Error::InvalidInput("at least one harmonic is needed".into()));
    }
    if hold_times_us.iter().any(|t| !t.is_finite()) || series.iter().flatten().any(|p| !p.is_finite()) {
        return Err(Error::NonFinite("Bloch series"));
    }
    let mut distinct: Vec<f64> = hold_times_us.to_vec();
    distinct.sort_by(f64::total_cmp);
    distinct.dedup();
    let n_params = 2 * config.harmonics + 2;
    if distinct.len() < n_params + 2 || hold_times_us.len() * config.ports.len() < n_params * config.ports.len() + 2 {
        return Err(Error::InsufficientData("too few hold times for the fit".into()));
    }
    let span = distinct[distinct.len() - 1] - distinct[0];
    let min_step = distinct.windows(2).map(|w| w[1] - w[0]).fold(f64::INFINITY, f64::min);

    let ys: Vec<Vec<f64>> = config
        .ports
        .iter()
        .map(|&j| series.iter().map(|p| p[(j + PORT_REACH) as usize]).collect())
        .collect();
    let tss: f64 = ys
        .iter()
        .map(|y| {
            let m = y.iter().sum::<f64>() / y.len() as f64;
            y.iter().map(|v| (v - m).powi(2)).sum::<f64>()
        })
        .sum();
    if !(tss > 1e-20) {
        return Err(Error::Estimation("no oscillation detected: the series is flat".into()));
    }
    let problem = Problem {
        times: hold_times_us,
        ys,
    };

    // Coarse scan of the fundamental between one period per span and Nyquist.
    let w_lo = 2.0 * std::f64::consts::PI / span;
    let w_hi = std::f64::consts::PI / min_step;
    let step = w_lo / 20.0;
    let n_scan = ((w_hi - w_lo) / step).ceil() as usize + 1;
    let mut best = (f64::INFINITY, w_lo);
    for k in 0..n_scan {
        let w = w_lo + step * k as f64;
        let r = problem.rss(w, 1);
        if r < best.0 {
            best = (r, w);
        }
    }
    let coarse = golden_min(|w| problem.rss(w, 1), (best.1 - step).max(0.5 * w_lo), best.1 + step);
    let omega = golden_min(
        |w| problem.rss(w, config.harmonics),
        coarse * (1.0 - 0.5 * step / coarse),
        coarse * (1.0 + 0.5 * step / coarse),
    );

    let (betas, rss) = problem
        .project(omega, config.harmonics)
        .ok_or_else(|| Error::Estimation("singular design in the period fit".into()))?;
    let r_squared = 1.0 - rss / tss;
    if r_squared < config.min_r_squared {
        return Err(Error::Estimation(format!(
            "no oscillation detected (R² = {r_squared:.3})"
        )));
    }

    // var(ω) = s² / Σ_j |(1 - P_X) ∂f_j/∂ω|².
    let x = problem.design(omega, config.harmonics);
    let xtx = (x.transpose() * &x)
        .cholesky()
        .ok_or_else(|| Error::Estimation("singular design in the period fit".into()))?;
    let mut info = 0.0;
    for beta in &betas {
        let g = DVector::from_iterator(
            problem.times.len(),
            problem.times.iter().map(|&t| {
                (1..=config.harmonics)
                    .map(|h| {
                        let hf = h as f64;
                        let (s, c) = (hf * omega * t).sin_cos();
                        hf * t * (-beta[2 * h - 1] * s + beta[2 * h] * c)
                    })
                    .sum::<f64>()
            }),
        );
        let proj = &x * xtx.solve(&(x.transpose() * &g));
        info += (g - proj).norm_squared();
    }
    let n_obs = (problem.times.len() * problem.ys.len()) as f64;
    let dof = n_obs - (problem.ys.len() * (2 * config.harmonics + 1) + 1) as f64;
    let s2 = rss / dof;
    let sigma_omega = if info > 0.0 { (s2 / info).sqrt() } else { f64::INFINITY };

    let period_us = 2.0 * std::f64::consts::PI / omega;
    let accel_g = physical.accel_from_bloch_period(period_us * 1e-6);
    Ok(BlochFit {
        accel_g,
        sigma_g: accel_g * sigma_omega / omega,
        period_us,
        sigma_period_us: period_us * sigma_omega / omega,
        r_squared,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    fn sinusoid(period: f64, times: &[f64]) -> Vec<[f64; PORTS]> {
        times
            .iter()
            .map(|&t| {
                let c = (2.0 * std::f64::consts::PI * t / period).cos();
                let mut p = [0.0; PORTS];
                p[2] = 0.15 * (1.0 - c);
                p[4] = 0.15 * (1.0 + c);
                p[3] = 1.0 - p[2] - p[4];
                p
            })
            .collect()
    }

    #[test]
    fn exact_sinusoid() {
        let phys = PhysicalConfig::rubidium_87_1064nm();
        let times: Vec<f64> = (0..150).map(|i| 12.0 * i as f64).collect();
        let period = phys.bloch_period(1.3) * 1e6;
        let fit = fit_bloch_period(&times, &sinusoid(period, &times), &BlochFitConfig::default(), &phys).unwrap();
        assert_relative_eq!(fit.period_us, period, max_relative = 1e-9);
        assert_relative_eq!(fit.accel_g, 1.3, max_relative = 1e-9);
        assert!(fit.r_squared > 0.999_999);
    }

    #[test]
    fn flat_series_is_rejected() {
        let phys = PhysicalConfig::rubidium_87_1064nm();
        let times: Vec<f64> = (0..50).map(|i| 20.0 * i as f64).collect();
        let flat = vec![[0.0, 0.0, 0.1, 0.8, 0.1, 0.0, 0.0]; 50];
        assert!(matches!(
            fit_bloch_period(&times, &flat, &BlochFitConfig::default(), &phys),
            Err(Error::Estimation(_))
        ));
    }
}

//! Grid posterior over (a_x, a_z) with a separable multinomial likelihood.
//!
//! With `P(m_x, m_z | a) = p_{m_x}(a_x) p_{m_z}(a_z)` the log-likelihood of a
//! shot reduces to per-axis sums over marginal counts, so the posterior under
//! a uniform prior depends only on the accumulated marginal counts.

use std::io::Write;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::model::{channel_label, EmpiricalModel, ModelPair};
use crate::dynamics::{AccelerationVector, Axis};
use crate::error::{Error, Result};
use crate::imaging::ShotRecord;
use crate::lattice::PORTS;
use crate::numeric::{log_sum_exp, neumaier_sum};

/// Default posterior grid resolution per axis.
pub const DEFAULT_RESOLUTION: usize = 201;

/// Natural-log probability below which an observed channel is deemed unsupported.
const SUPPORT_LOG_TAIL: f64 = -27.6;

/// Discretized posterior; `probabilities[iz * nx + ix]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Posterior {
    pub a_x: Vec<f64>,
    pub a_z: Vec<f64>,
    pub probabilities: Vec<f64>,
}

fn linspace(lo: f64, hi: f64, n: usize) -> Vec<f64> {
    if n == 1 {
        return vec![0.5 * (lo + hi)];
    }
    (0..n).map(|i| lo + (hi - lo) * i as f64 / (n - 1) as f64).collect()
}

impl Posterior {
    /// Uniform prior over the rectangle.
    pub fn uniform(range_x: [f64; 2], range_z: [f64; 2], nx: usize, nz: usize) -> Result<Self> {
        if nx == 0 || nz == 0 {
            return Err(Error::InvalidInput("posterior grid needs at least one point per axis".into()));
        }
        for r in [range_x, range_z] {
            if !(r[0].is_finite() && r[1].is_finite() && r[1] >= r[0]) {
                return Err(Error::InvalidInput(format!("bad posterior range {r:?}")));
            }
        }
        let n = nx * nz;
        Ok(Self {
            a_x: linspace(range_x[0], range_x[1], nx),
            a_z: linspace(range_z[0], range_z[1], nz),
            probabilities: vec![1.0 / n as f64; n],
        })
    }

    /// Uniform prior over the model rectangle at the default resolution.
    pub fn prior(models: &ModelPair) -> Result<Self> {
        Self::uniform(models.x.range, models.z.range, DEFAULT_RESOLUTION, DEFAULT_RESOLUTION)
    }

    /// Normalized posterior from separable log-weights.
    fn from_log_axes(a_x: Vec<f64>, a_z: Vec<f64>, log_x: &[f64], log_z: &[f64]) -> Result<Self> {
        let lx = log_sum_exp(log_x);
        let lz = log_sum_exp(log_z);
        if !lx.is_finite() || !lz.is_finite() {
            return Err(Error::Estimation("posterior vanished everywhere on the grid".into()));
        }
        let px: Vec<f64> = log_x.iter().map(|l| (l - lx).exp()).collect();
        let pz: Vec<f64> = log_z.iter().map(|l| (l - lz).exp()).collect();
        let mut probabilities = Vec::with_capacity(px.len() * pz.len());
        for z in &pz {
            probabilities.extend(px.iter().map(|x| x * z));
        }
        let mut post = Self {
            a_x,
            a_z,
            probabilities,
        };
        post.renormalize()?;
        Ok(post)
    }

    fn renormalize(&mut self) -> Result<()> {
        let total = neumaier_sum(self.probabilities.iter().copied());
        if !(total > 0.0) || !total.is_finite() {
            return Err(Error::Estimation("posterior has no mass".into()));
        }
        self.probabilities.iter_mut().for_each(|p| *p /= total);
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        if self.probabilities.len() != self.a_x.len() * self.a_z.len() {
            return Err(Error::DimensionMismatch {
                expected: self.a_x.len() * self.a_z.len(),
                got: self.probabilities.len(),
            });
        }
        if self.probabilities.iter().any(|p| !p.is_finite() || *p < 0.0) {
            return Err(Error::InvalidInput("posterior entries must be non-negative".into()));
        }
        let total = neumaier_sum(self.probabilities.iter().copied());
        if (total - 1.0).abs() > 1e-12 {
            return Err(Error::InvalidInput(format!("posterior sums to {total}")));
        }
        Ok(())
    }

    pub fn marginal_x(&self) -> Vec<f64> {
        let nx = self.a_x.len();
        let mut out = vec![0.0; nx];
        for row in self.probabilities.chunks_exact(nx) {
            out.iter_mut().zip(row).for_each(|(o, p)| *o += p);
        }
        out
    }

    pub fn marginal_z(&self) -> Vec<f64> {
        let nx = self.a_x.len();
        self.probabilities
            .chunks_exact(nx)
            .map(|row| neumaier_sum(row.iter().copied()))
            .collect()
    }

    /// CSV with columns `a_x,a_z,probability`.
    pub fn write_csv<W: Write>(&self, mut out: W) -> Result<()> {
        writeln!(out, "a_x,a_z,probability")?;
        let nx = self.a_x.len();
        for (iz, az) in self.a_z.iter().enumerate() {
            for (ix, ax) in self.a_x.iter().enumerate() {
                writeln!(out, "{ax},{az},{:e}", self.probabilities[iz * nx + ix])?;
            }
        }
        Ok(())
    }
}

/// Posterior mean and per-axis standard deviation.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PosteriorStats {
    pub mean: AccelerationVector,
    pub std: [f64; 2],
}

fn moments(grid: &[f64], weights: &[f64]) -> (f64, f64) {
    let mean = neumaier_sum(grid.iter().zip(weights).map(|(a, w)| a * w));
    let var = neumaier_sum(grid.iter().zip(weights).map(|(a, w)| w * (a - mean).powi(2)));
    (mean, var.max(0.0).sqrt())
}

pub fn posterior_stats(post: &Posterior) -> PosteriorStats {
    let (mx, sx) = moments(&post.a_x, &post.marginal_x());
    let (mz, sz) = moments(&post.a_z, &post.marginal_z());
    PosteriorStats {
        mean: AccelerationVector { a_x: mx, a_z: mz },
        std: [sx, sz],
    }
}

/// Marginal counts of a shot for both axes after rounding `n_trial × weights`.
pub fn marginal_counts(shot: &ShotRecord, n_trial: f64) -> Result<([u64; PORTS], [u64; PORTS])> {
    shot.validate()?;
    let counts = shot.counts(n_trial);
    let mut cx = [0u64; PORTS];
    let mut cz = [0u64; PORTS];
    for (i, c) in counts.iter().enumerate() {
        cx[i % PORTS] += c;
        cz[i / PORTS] += c;
    }
    Ok((cx, cz))
}

/// Table of `ln p_m(a)` on a grid.
fn log_table(model: &EmpiricalModel, grid: &[f64]) -> Vec<[f64; PORTS]> {
    grid.iter()
        .map(|&a| model.eval_with_derivative(a).0.map(f64::ln))
        .collect()
}

fn log_likelihood(table: &[[f64; PORTS]], counts: &[u64; PORTS]) -> Vec<f64> {
    table
        .iter()
        .map(|lp| neumaier_sum(lp.iter().zip(counts).map(|(l, &c)| c as f64 * l)))
        .collect()
}

/// Channels whose observed counts are implausible for every acceleration in range.
fn unsupported_channels(model: &EmpiricalModel, table: &[[f64; PORTS]], counts: &[u64; PORTS]) -> Vec<String> {
    let total: u64 = counts.iter().sum();
    let mut bad = Vec::new();
    for m in 0..PORTS {
        let n = counts[m] as f64;
        if n == 0.0 {
            continue;
        }
        let pmax = table.iter().map(|lp| lp[m]).fold(f64::NEG_INFINITY, f64::max).exp();
        let lambda = total as f64 * pmax;
        if n > lambda {
            // Chernoff bound on P(X >= n) for a Poisson-like count with mean λ.
            let log_tail = -(n * (n / lambda).ln() - n + lambda);
            if log_tail < SUPPORT_LOG_TAIL {
                bad.push(channel_label(model.axis, m));
            }
        }
    }
    bad
}

fn check_support(models: &ModelPair, tables: (&[[f64; PORTS]], &[[f64; PORTS]]), counts: (&[u64; PORTS], &[u64; PORTS])) -> Result<()> {
    let mut channels = unsupported_channels(&models.x, tables.0, counts.0);
    channels.extend(unsupported_channels(&models.z, tables.1, counts.1));
    if channels.is_empty() {
        Ok(())
    } else {
        Err(Error::OutsideSupport { channels })
    }
}

fn check_n_trial(n_trial: f64) -> Result<()> {
    if !(n_trial.is_finite() && n_trial >= 1.0) {
        return Err(Error::InvalidInput(format!("n_trial must be at least 1, got {n_trial}")));
    }
    Ok(())
}

/// One Bayesian update of `post` with `shot`, computed in the log domain.
pub fn bayes_update(post: &Posterior, shot: &ShotRecord, models: &ModelPair, n_trial: f64) -> Result<Posterior> {
    post.validate()?;
    check_n_trial(n_trial)?;
    let (cx, cz) = marginal_counts(shot, n_trial)?;
    let tx = log_table(&models.x, &post.a_x);
    let tz = log_table(&models.z, &post.a_z);
    check_support(models, (&tx, &tz), (&cx, &cz))?;
    let lx = log_likelihood(&tx, &cx);
    let lz = log_likelihood(&tz, &cz);
    let nx = post.a_x.len();
    let log_post: Vec<f64> = post
        .probabilities
        .par_iter()
        .enumerate()
        .map(|(i, &p)| p.ln() + lx[i % nx] + lz[i / nx])
        .collect();
    let norm = log_sum_exp(&log_post);
    if !norm.is_finite() {
        return Err(Error::Estimation("likelihood vanished on the whole grid".into()));
    }
    let mut out = Posterior {
        a_x: post.a_x.clone(),
        a_z: post.a_z.clone(),
        probabilities: log_post.iter().map(|l| (l - norm).exp()).collect(),
    };
    out.renormalize()?;
    Ok(out)
}

/// Accumulates marginal counts and evaluates the uniform-prior posterior on
/// demand, zooming the grid in when the posterior is narrower than its spacing.
#[derive(Clone, Debug)]
pub struct PosteriorAccumulator {
    models: ModelPair,
    n_trial: f64,
    resolution: usize,
    counts_x: [u64; PORTS],
    counts_z: [u64; PORTS],
    shots: usize,
}

/// Posterior grid width in standard deviations after zooming.
const ZOOM_HALF_WIDTH: f64 = 12.0;
/// Zoom when the posterior std is below this many grid spacings.
const ZOOM_TRIGGER: f64 = 8.0;

impl PosteriorAccumulator {
    pub fn new(models: ModelPair, n_trial: f64, resolution: usize) -> Result<Self> {
        check_n_trial(n_trial)?;
        if resolution < 3 {
            return Err(Error::InvalidInput("posterior resolution must be at least 3".into()));
        }
        Ok(Self {
            models,
            n_trial,
            resolution,
            counts_x: [0; PORTS],
            counts_z: [0; PORTS],
            shots: 0,
        })
    }

    pub fn shots(&self) -> usize {
        self.shots
    }

    pub fn add(&mut self, shot: &ShotRecord) -> Result<()> {
        let (cx, cz) = marginal_counts(shot, self.n_trial)?;
        let grid_x = linspace(self.models.x.range[0], self.models.x.range[1], self.resolution);
        let grid_z = linspace(self.models.z.range[0], self.models.z.range[1], self.resolution);
        check_support(
            &self.models,
            (&log_table(&self.models.x, &grid_x), &log_table(&self.models.z, &grid_z)),
            (&cx, &cz),
        )?;
        self.counts_x.iter_mut().zip(cx).for_each(|(a, c)| *a += c);
        self.counts_z.iter_mut().zip(cz).for_each(|(a, c)| *a += c);
        self.shots += 1;
        Ok(())
    }

    fn axis_log_posterior(&self, axis: Axis, grid: &[f64]) -> Vec<f64> {
        let (model, counts) = match axis {
            Axis::X => (&self.models.x, &self.counts_x),
            Axis::Z => (&self.models.z, &self.counts_z),
        };
        log_likelihood(&log_table(model, grid), counts)
    }

    /// Zooms one axis until its grid resolves the posterior.
    fn resolve_axis(&self, axis: Axis) -> (Vec<f64>, Vec<f64>) {
        let range = self.models.get(axis).range;
        let mut grid = linspace(range[0], range[1], self.resolution);
        let mut logp = self.axis_log_posterior(axis, &grid);
        for _ in 0..8 {
            let norm = log_sum_exp(&logp);
            let w: Vec<f64> = logp.iter().map(|l| (l - norm).exp()).collect();
            let (mean, std) = moments(&grid, &w);
            let spacing = grid[1] - grid[0];
            if std >= ZOOM_TRIGGER * spacing || spacing < 1e-12 {
                break;
            }
            // A collapsed posterior still lies within a couple of spacings of its mean.
            let half = (ZOOM_HALF_WIDTH * std).max(2.0 * spacing);
            let lo = (mean - half).max(range[0]);
            let hi = (mean + half).min(range[1]);
            grid = linspace(lo, hi, self.resolution);
            logp = self.axis_log_posterior(axis, &grid);
        }
        (grid, logp)
    }

    pub fn posterior(&self) -> Result<Posterior> {
        let (gx, lx) = self.resolve_axis(Axis::X);
        let (gz, lz) = self.resolve_axis(Axis::Z);
        Posterior::from_log_axes(gx, gz, &lx, &lz)
    }

    /// Posterior on the fixed full-range grid, without zooming.
    pub fn posterior_fixed_grid(&self) -> Result<Posterior> {
        let gx = linspace(self.models.x.range[0], self.models.x.range[1], self.resolution);
        let gz = linspace(self.models.z.range[0], self.models.z.range[1], self.resolution);
        let lx = self.axis_log_posterior(Axis::X, &gx);
        let lz = self.axis_log_posterior(Axis::Z, &gz);
        Posterior::from_log_axes(gx, gz, &lx, &lz)
    }
}

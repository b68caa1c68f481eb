//! Synthetic detection: noisy shots from ideal grids, absorption-image rasters,
//! and grid recovery from rasters.

use std::io::{BufRead, BufReader, Read, Write};
use std::path::Path;

use nalgebra::SMatrix;
use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Binomial, Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dynamics::MomentumGrid;
use crate::error::{Error, Result};
use crate::lattice::{PhysicalConfig, PORTS, PORT_REACH};

/// Number of bins in a 2D shot.
pub const BINS: usize = PORTS * PORTS;

/// Multinomial detection with a finite number of effective trials and probe-gain noise.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct DetectionModel {
    pub n_trial: f64,
    pub gain_sigma: f64,
    pub seed: u64,
}

impl DetectionModel {
    pub fn new(n_trial: f64, gain_sigma: f64, seed: u64) -> Result<Self> {
        let m = Self {
            n_trial,
            gain_sigma,
            seed,
        };
        m.validate()?;
        Ok(m)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.n_trial.is_finite() && self.n_trial > 0.0) {
            return Err(Error::InvalidInput(format!("n_trial must be positive, got {}", self.n_trial)));
        }
        if !(self.gain_sigma.is_finite() && self.gain_sigma >= 0.0) {
            return Err(Error::InvalidInput(format!(
                "gain_sigma must be non-negative, got {}",
                self.gain_sigma
            )));
        }
        Ok(())
    }

    pub fn with_seed(&self, seed: u64) -> Self {
        Self { seed, ..*self }
    }
}

/// Seed of the `counter`-th stream derived from `master`.
pub fn sub_seed(master: u64, counter: u64) -> u64 {
    let mut rng = ChaCha8Rng::seed_from_u64(master);
    rng.set_stream(counter);
    rng.next_u64()
}

/// One detected shot: normalized weights over the 7×7 bins (row-major z × x).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ShotRecord {
    pub weights: Vec<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub a_applied: Option<[f64; 2]>,
    pub seed: u64,
    /// Acquisition time label in seconds.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub timestamp: Option<f64>,
}

impl ShotRecord {
    /// Normalizes `weights` (non-negative, positive total) into a record.
    pub fn new(weights: Vec<f64>, seed: u64) -> Result<Self> {
        if weights.len() != BINS {
            return Err(Error::DimensionMismatch {
                expected: BINS,
                got: weights.len(),
            });
        }
        if weights.iter().any(|w| !w.is_finite() || *w < 0.0) {
            return Err(Error::InvalidInput("shot weights must be finite and non-negative".into()));
        }
        let total: f64 = weights.iter().sum();
        if total <= 0.0 {
            return Err(Error::InvalidInput("shot has zero total weight".into()));
        }
        Ok(Self {
            weights: weights.into_iter().map(|w| w / total).collect(),
            a_applied: None,
            seed,
            timestamp: None,
        })
    }

    pub fn from_grid(grid: &MomentumGrid, seed: u64) -> Self {
        Self {
            weights: grid.row_major(),
            a_applied: None,
            seed,
            timestamp: None,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.weights.len() != BINS {
            return Err(Error::DimensionMismatch {
                expected: BINS,
                got: self.weights.len(),
            });
        }
        if self.weights.iter().any(|w| !w.is_finite() || *w < 0.0) {
            return Err(Error::InvalidInput("shot weights must be finite and non-negative".into()));
        }
        let total: f64 = self.weights.iter().sum();
        if (total - 1.0).abs() > 1e-9 {
            return Err(Error::InvalidInput(format!("shot weights sum to {total}, not 1")));
        }
        Ok(())
    }

    pub fn grid(&self) -> Result<MomentumGrid> {
        MomentumGrid::from_row_major(&self.weights)
    }

    /// Integer counts `n_trial × weights`, rounded by largest remainder so they
    /// total `round(n_trial)`.
    pub fn counts(&self, n_trial: f64) -> Vec<u64> {
        let total = n_trial.round().max(0.0) as u64;
        let scaled: Vec<f64> = self.weights.iter().map(|w| w * total as f64).collect();
        let mut counts: Vec<u64> = scaled.iter().map(|s| s.floor() as u64).collect();
        let assigned: u64 = counts.iter().sum();
        let mut order: Vec<usize> = (0..scaled.len()).collect();
        order.sort_by(|&a, &b| {
            let ra = scaled[a] - scaled[a].floor();
            let rb = scaled[b] - scaled[b].floor();
            rb.total_cmp(&ra).then(a.cmp(&b))
        });
        for &i in order.iter().take(total.saturating_sub(assigned) as usize) {
            counts[i] += 1;
        }
        counts
    }

    pub fn read(path: impl AsRef<Path>) -> Result<Self> {
        let rec: Self = serde_json::from_reader(BufReader::new(std::fs::File::open(path)?))?;
        rec.validate()?;
        Ok(rec)
    }

    pub fn write(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut f = std::fs::File::create(path)?;
        serde_json::to_writer_pretty(&mut f, self)?;
        writeln!(f)?;
        Ok(())
    }
}

/// Draws one shot: multinomial counts over the 49 bins with `round(n_trial)`
/// trials, then an independent gain factor `1 + N(0, gain_sigma)` per bin.
pub fn sample_shot(grid: &MomentumGrid, model: &DetectionModel) -> Result<ShotRecord> {
    grid.validate()?;
    model.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(model.seed);
    let trials = (model.n_trial.round() as u64).max(1);
    let probs = grid.row_major();

    let mut counts = vec![0u64; BINS];
    let mut remaining = trials;
    let mut mass_left = 1.0;
    for (i, &p) in probs.iter().enumerate() {
        if remaining == 0 {
            break;
        }
        if i == BINS - 1 || mass_left <= 0.0 {
            counts[i] = remaining;
            break;
        }
        let cond = (p / mass_left).clamp(0.0, 1.0);
        let draw = Binomial::new(remaining, cond)
            .map_err(|e| Error::InvalidInput(format!("binomial draw: {e}")))?
            .sample(&mut rng);
        counts[i] = draw;
        remaining -= draw;
        mass_left -= p;
    }

    let mut weights: Vec<f64> = counts.iter().map(|&c| c as f64).collect();
    if model.gain_sigma > 0.0 {
        let gain = Normal::new(1.0, model.gain_sigma).expect("validated sigma");
        let noisy: Vec<f64> = weights.iter().map(|w| w * gain.sample(&mut rng).max(0.0)).collect();
        if noisy.iter().sum::<f64>() > 0.0 {
            weights = noisy;
        }
    }
    ShotRecord::new(weights, model.seed)
}

/// `count` shots with per-shot seeds derived from `model.seed`, sampled in parallel.
pub fn sample_shots(grid: &MomentumGrid, model: &DetectionModel, count: usize) -> Result<Vec<ShotRecord>> {
    (0..count as u64)
        .into_par_iter()
        .map(|k| sample_shot(grid, &model.with_seed(sub_seed(model.seed, k))))
        .collect()
}

/// Geometry of a rendered absorption image.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ImagingConfig {
    pub tof_ms: f64,
    pub cloud_sigma_um: f64,
    pub pixel_size_um: f64,
    /// Accepted time-of-flight range in ms.
    pub tof_window_ms: (f64, f64),
}

impl Default for ImagingConfig {
    fn default() -> Self {
        Self {
            tof_ms: 12.0,
            cloud_sigma_um: 15.0,
            pixel_size_um: 5.0,
            tof_window_ms: (10.0, 14.0),
        }
    }
}

impl ImagingConfig {
    pub fn validate(&self) -> Result<()> {
        let (lo, hi) = self.tof_window_ms;
        if !(self.tof_ms.is_finite() && self.tof_ms >= lo && self.tof_ms <= hi) {
            return Err(Error::InvalidInput(format!(
                "time of flight {} ms outside [{lo}, {hi}] ms",
                self.tof_ms
            )));
        }
        for (name, v) in [("cloud_sigma_um", self.cloud_sigma_um), ("pixel_size_um", self.pixel_size_um)] {
            if !(v.is_finite() && v > 0.0) {
                return Err(Error::InvalidInput(format!("{name} must be positive, got {v}")));
            }
        }
        Ok(())
    }
}

/// Distance between neighbouring diffraction orders after time of flight, in μm.
pub fn port_spacing_um(physical: &PhysicalConfig, tof_ms: f64) -> f64 {
    2.0 * physical.recoil_velocity() * tof_ms * 1e-3 * 1e6
}

/// Metadata stored next to a PGM raster.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ImageSidecar {
    pub pixel_size_um: f64,
    pub tof_ms: f64,
    pub port_spacing_px: f64,
    pub center_px: [f64; 2],
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub cloud_sigma_um: Option<f64>,
    /// Optical density represented by one grey level.
    pub od_per_count: f64,
}

/// Optical-density raster, row-major with rows along z.
#[derive(Clone, Debug, PartialEq)]
pub struct AbsorptionImage {
    pub optical_density: Vec<f64>,
    pub width: usize,
    pub height: usize,
    pub pixel_size_um: f64,
    pub tof_ms: f64,
    pub port_spacing_px: f64,
    /// Continuous pixel coordinates (x, z) of the zero-momentum port.
    pub center_px: [f64; 2],
    pub cloud_sigma_um: Option<f64>,
}

impl AbsorptionImage {
    pub fn validate(&self) -> Result<()> {
        if self.optical_density.len() != self.width * self.height {
            return Err(Error::DimensionMismatch {
                expected: self.width * self.height,
                got: self.optical_density.len(),
            });
        }
        if self.optical_density.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("optical density"));
        }
        if !(self.port_spacing_px.is_finite() && self.port_spacing_px > 0.0) {
            return Err(Error::InvalidInput("port spacing must be positive".into()));
        }
        Ok(())
    }

    /// Checks the stored spacing against `2ħk·tof/(m·pixel_size)`.
    pub fn check_spacing(&self, physical: &PhysicalConfig) -> Result<()> {
        let expect = port_spacing_um(physical, self.tof_ms) / self.pixel_size_um;
        if (expect - self.port_spacing_px).abs() > 1e-6 * expect {
            return Err(Error::InvalidInput(format!(
                "port spacing {} px disagrees with {expect} px from time of flight",
                self.port_spacing_px
            )));
        }
        Ok(())
    }

    pub fn at(&self, x: usize, z: usize) -> f64 {
        self.optical_density[z * self.width + x]
    }

    /// Writes a 16-bit binary PGM plus a JSON sidecar.
    pub fn write_pgm(&self, pgm: impl AsRef<Path>, sidecar: impl AsRef<Path>) -> Result<()> {
        self.validate()?;
        let max = self.optical_density.iter().copied().fold(0.0, f64::max);
        let od_per_count = if max > 0.0 { max / 65535.0 } else { 1.0 };
        let mut out = Vec::with_capacity(2 * self.optical_density.len() + 32);
        write!(out, "P5\n{} {}\n65535\n", self.width, self.height)?;
        for v in &self.optical_density {
            let level = (v.max(0.0) / od_per_count).round().min(65535.0) as u16;
            out.extend_from_slice(&level.to_be_bytes());
        }
        std::fs::write(pgm, out)?;
        let meta = ImageSidecar {
            pixel_size_um: self.pixel_size_um,
            tof_ms: self.tof_ms,
            port_spacing_px: self.port_spacing_px,
            center_px: self.center_px,
            cloud_sigma_um: self.cloud_sigma_um,
            od_per_count,
        };
        let mut f = std::fs::File::create(sidecar)?;
        serde_json::to_writer_pretty(&mut f, &meta)?;
        writeln!(f)?;
        Ok(())
    }

    pub fn read_pgm(pgm: impl AsRef<Path>, sidecar: impl AsRef<Path>) -> Result<Self> {
        let meta: ImageSidecar = serde_json::from_reader(BufReader::new(std::fs::File::open(sidecar)?))?;
        let mut reader = BufReader::new(std::fs::File::open(pgm)?);
        let mut header = Vec::new();
        while header.len() < 4 {
            let mut line = String::new();
            if reader.read_line(&mut line)? == 0 {
                return Err(Error::Parse("truncated PGM header".into()));
            }
            let line = line.split('#').next().unwrap_or("");
            header.extend(line.split_whitespace().map(str::to_owned));
        }
        if header[0] != "P5" {
            return Err(Error::Parse(format!("unsupported PGM magic '{}'", header[0])));
        }
        let parse = |s: &str| s.parse::<usize>().map_err(|_| Error::Parse(format!("bad PGM field '{s}'")));
        let (width, height, maxval) = (parse(&header[1])?, parse(&header[2])?, parse(&header[3])?);
        if maxval != 65535 {
            return Err(Error::Parse(format!("expected 16-bit PGM, maxval {maxval}")));
        }
        let mut raw = vec![0u8; 2 * width * height];
        reader.read_exact(&mut raw)?;
        let optical_density = raw
            .chunks_exact(2)
            .map(|b| u16::from_be_bytes([b[0], b[1]]) as f64 * meta.od_per_count)
            .collect();
        let img = Self {
            optical_density,
            width,
            height,
            pixel_size_um: meta.pixel_size_um,
            tof_ms: meta.tof_ms,
            port_spacing_px: meta.port_spacing_px,
            center_px: meta.center_px,
            cloud_sigma_um: meta.cloud_sigma_um,
        };
        img.validate()?;
        Ok(img)
    }
}

/// Mass of a unit Gaussian (centre `mu`, width `sigma`, pixel units) inside `[lo, hi)`.
fn gaussian_mass(lo: f64, hi: f64, mu: f64, sigma: f64) -> f64 {
    let s = sigma * std::f64::consts::SQRT_2;
    0.5 * (libm::erf((hi - mu) / s) - libm::erf((lo - mu) / s))
}

fn port_offset(index: usize) -> f64 {
    index as f64 - PORT_REACH as f64
}

/// Renders the grid as 49 pixel-integrated Gaussian clouds.
pub fn render_image(
    grid: &MomentumGrid,
    config: &ImagingConfig,
    physical: &PhysicalConfig,
) -> Result<AbsorptionImage> {
    grid.validate()?;
    config.validate()?;
    let spacing_um = port_spacing_um(physical, config.tof_ms);
    if spacing_um < 3.0 * config.cloud_sigma_um {
        return Err(Error::Discrimination {
            spacing_um,
            sigma_um: config.cloud_sigma_um,
        });
    }
    let spacing = spacing_um / config.pixel_size_um;
    let sigma = config.cloud_sigma_um / config.pixel_size_um;
    let margin = (6.0 * sigma).max(spacing);
    let size = (2.0 * (PORT_REACH as f64 * spacing + margin)).ceil() as usize;
    let center = size as f64 / 2.0;

    // Separable per-axis pixel masses for each port.
    let profile = |p: usize| -> Vec<f64> {
        let mu = center + port_offset(p) * spacing;
        (0..size)
            .map(|i| gaussian_mass(i as f64, i as f64 + 1.0, mu, sigma))
            .collect()
    };
    let profiles: Vec<Vec<f64>> = (0..PORTS).map(profile).collect();

    let mut od = vec![0.0; size * size];
    for (pz, row) in grid.probabilities.iter().enumerate() {
        for (px, &w) in row.iter().enumerate() {
            if w == 0.0 {
                continue;
            }
            for (z, &mz) in profiles[pz].iter().enumerate() {
                let a = w * mz;
                if a < 1e-300 {
                    continue;
                }
                let line = &mut od[z * size..(z + 1) * size];
                for (cell, &mx) in line.iter_mut().zip(&profiles[px]) {
                    *cell += a * mx;
                }
            }
        }
    }
    Ok(AbsorptionImage {
        optical_density: od,
        width: size,
        height: size,
        pixel_size_um: config.pixel_size_um,
        tof_ms: config.tof_ms,
        port_spacing_px: spacing,
        center_px: [center, center],
        cloud_sigma_um: Some(config.cloud_sigma_um),
    })
}

/// Result of [`extract_grid`].
#[derive(Clone, Debug, PartialEq)]
pub struct ExtractedGrid {
    pub grid: MomentumGrid,
    /// Total |OD| of negative pixels that were set to zero.
    pub clipped_mass: f64,
}

/// ROI index of a pixel coordinate along one axis, if it falls in a port ROI.
fn roi_of(pixel: usize, center: f64, spacing: f64) -> Option<usize> {
    let u = (pixel as f64 + 0.5 - center) / spacing;
    let idx = (u + 0.5).floor() as i64 + PORT_REACH as i64;
    (0..PORTS as i64).contains(&idx).then_some(idx as usize)
}

/// Integrates optical density in 7×7 square ROIs of side one port spacing.
///
/// When the cloud width is known, spill between neighbouring ROIs is undone
/// with the per-axis crosstalk matrix.
pub fn extract_grid(image: &AbsorptionImage) -> Result<ExtractedGrid> {
    image.validate()?;
    let spacing = image.port_spacing_px;
    let [cx, cz] = image.center_px;
    let half = PORT_REACH as f64 * spacing + 0.5 * spacing;
    if cx - half < -0.5 || cz - half < -0.5 || cx + half > image.width as f64 + 0.5 || cz + half > image.height as f64 + 0.5 {
        return Err(Error::InvalidInput("port ROIs extend beyond the image".into()));
    }

    let mut clipped_mass = 0.0;
    let mut m = SMatrix::<f64, PORTS, PORTS>::zeros();
    for z in 0..image.height {
        let rz = roi_of(z, cz, spacing);
        for x in 0..image.width {
            let v = image.at(x, z);
            if v < 0.0 {
                clipped_mass -= v;
                continue;
            }
            if let (Some(rz), Some(rx)) = (rz, roi_of(x, cx, spacing)) {
                m[(rz, rx)] += v;
            }
        }
    }

    let mut g = m;
    if let Some(sigma_um) = image.cloud_sigma_um {
        let sigma = sigma_um / image.pixel_size_um;
        let crosstalk = |center: f64, len: usize| -> Option<SMatrix<f64, PORTS, PORTS>> {
            let mut c = SMatrix::<f64, PORTS, PORTS>::zeros();
            for i in 0..len {
                let Some(r) = roi_of(i, center, spacing) else { continue };
                for p in 0..PORTS {
                    let mu = center + port_offset(p) * spacing;
                    c[(r, p)] += gaussian_mass(i as f64, i as f64 + 1.0, mu, sigma);
                }
            }
            c.try_inverse()
        };
        let cz_inv = crosstalk(cz, image.height)
            .ok_or_else(|| Error::Estimation("singular crosstalk matrix".into()))?;
        let cx_inv = crosstalk(cx, image.width)
            .ok_or_else(|| Error::Estimation("singular crosstalk matrix".into()))?;
        g = cz_inv * m * cx_inv.transpose();
    }

    let mut probabilities = [[0.0; PORTS]; PORTS];
    let mut total = 0.0;
    for (r, row) in probabilities.iter_mut().enumerate() {
        for (c, cell) in row.iter_mut().enumerate() {
            *cell = g[(r, c)].max(0.0);
            total += *cell;
        }
    }
    if !(total > 0.0) {
        return Err(Error::InvalidInput("image contains no optical density in the port ROIs".into()));
    }
    for cell in probabilities.iter_mut().flatten() {
        *cell /= total;
    }
    Ok(ExtractedGrid {
        grid: MomentumGrid::new(probabilities)?,
        clipped_mass,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    fn phys() -> PhysicalConfig {
        PhysicalConfig::rubidium_87_1064nm()
    }

    fn uniform() -> MomentumGrid {
        MomentumGrid::new([[1.0 / 49.0; PORTS]; PORTS]).unwrap()
    }

    #[test]
    fn spacing_at_twelve_ms() {
        // 2ħk/m = 2h/(mλ) with SI constants.
        let h = 6.626_070_15e-34;
        let m = 86.909_180_527 * 1.660_539_066_60e-27;
        let v = 2.0 * h / (m * 1064e-9);
        assert_abs_diff_eq!(port_spacing_um(&phys(), 12.0), v * 12e-3 * 1e6, epsilon = 1e-6);
        assert_abs_diff_eq!(port_spacing_um(&phys(), 12.0), 103.6, epsilon = 0.1);
    }

    #[test]
    fn noiseless_large_n_shot() {
        let model = DetectionModel::new(1e6, 0.0, 3).unwrap();
        let shot = sample_shot(&uniform(), &model).unwrap();
        shot.validate().unwrap();
        assert!(shot.weights.iter().all(|w| (w - 1.0 / 49.0).abs() < 1e-2));
    }

    #[test]
    fn shots_are_seed_deterministic() {
        let model = DetectionModel::new(532.0, 0.05, 11).unwrap();
        let a = sample_shot(&uniform(), &model).unwrap();
        let b = sample_shot(&uniform(), &model).unwrap();
        assert_eq!(a, b);
        let c = sample_shot(&uniform(), &model.with_seed(12)).unwrap();
        assert_ne!(a, c);
        assert_ne!(sub_seed(1, 0), sub_seed(1, 1));
    }

    #[test]
    fn counts_keep_the_total() {
        let shot = ShotRecord::new(vec![1.0; BINS], 0).unwrap();
        let counts = shot.counts(532.0);
        assert_eq!(counts.iter().sum::<u64>(), 532);
        assert!(counts.iter().all(|&c| c == 10 || c == 11));
    }

    #[test]
    fn delta_grid_renders_one_blob() {
        let img = render_image(&MomentumGrid::delta_center(), &ImagingConfig::default(), &phys()).unwrap();
        let (mut best, mut at) = (0.0, (0, 0));
        for z in 0..img.height {
            for x in 0..img.width {
                if img.at(x, z) > best {
                    best = img.at(x, z);
                    at = (x, z);
                }
            }
        }
        assert!((at.0 as f64 + 0.5 - img.center_px[0]).abs() <= 1.0);
        assert!((at.1 as f64 + 0.5 - img.center_px[1]).abs() <= 1.0);
        let total: f64 = img.optical_density.iter().sum();
        assert_abs_diff_eq!(total, 1.0, epsilon = 1e-9);
        img.check_spacing(&phys()).unwrap();
        let back = extract_grid(&img).unwrap();
        assert_abs_diff_eq!(back.grid.center(), 1.0, epsilon = 1e-9);
    }

    #[test]
    fn overlapping_clouds_are_rejected() {
        let cfg = ImagingConfig {
            cloud_sigma_um: 40.0,
            ..Default::default()
        };
        assert!(matches!(
            render_image(&uniform(), &cfg, &phys()),
            Err(Error::Discrimination { .. })
        ));
        let cfg = ImagingConfig {
            tof_ms: 30.0,
            ..Default::default()
        };
        assert!(render_image(&uniform(), &cfg, &phys()).is_err());
    }

    #[test]
    fn blank_image_is_an_error() {
        let mut img = render_image(&uniform(), &ImagingConfig::default(), &phys()).unwrap();
        img.optical_density.iter_mut().for_each(|v| *v = 0.0);
        assert!(extract_grid(&img).is_err());
    }

    #[test]
    fn negative_pixels_are_clipped_and_reported() {
        let mut img = render_image(&uniform(), &ImagingConfig::default(), &phys()).unwrap();
        img.cloud_sigma_um = None;
        let idx = img.optical_density.len() / 2;
        img.optical_density[idx] = -0.25;
        let out = extract_grid(&img).unwrap();
        assert_abs_diff_eq!(out.clipped_mass, 0.25, epsilon = 1e-15);
    }
}

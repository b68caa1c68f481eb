//! Empirical calibration model and least-squares vector estimation.

use std::io::{BufReader, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::spline::BSplineBasis;
use crate::dynamics::{AccelerationVector, Axis, MomentumGrid};
use crate::error::{Error, Result};
use crate::imaging::ShotRecord;
use crate::lattice::{PORTS, PORT_REACH};

/// Per-axis marginals of a grid: (x = column sums, z = row sums).
pub fn marginalize(grid: &MomentumGrid) -> ([f64; PORTS], [f64; PORTS]) {
    let mut mx = [0.0; PORTS];
    let mut mz = [0.0; PORTS];
    for (z, row) in grid.probabilities.iter().enumerate() {
        for (x, &p) in row.iter().enumerate() {
            mx[x] += p;
            mz[z] += p;
        }
    }
    (mx, mz)
}

/// Marginals of a shot record.
pub fn shot_marginals(shot: &ShotRecord) -> Result<([f64; PORTS], [f64; PORTS])> {
    Ok(marginalize(&shot.grid()?))
}

/// Label of port `index` on `axis`, e.g. `x:-4hk`.
pub fn channel_label(axis: Axis, index: usize) -> String {
    let j = index as i32 - PORT_REACH;
    format!("{}:{:+}hk", axis.label(), 2 * j)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SplineConfig {
    /// Interior knot spacing in g.
    pub knot_spacing: f64,
    pub degree: usize,
    /// Probability floor applied before renormalization.
    pub epsilon: f64,
}

impl Default for SplineConfig {
    fn default() -> Self {
        Self {
            knot_spacing: 0.02,
            degree: 3,
            epsilon: 1e-4,
        }
    }
}

impl SplineConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.knot_spacing.is_finite() && self.knot_spacing > 0.0) {
            return Err(Error::InvalidInput(format!("bad knot spacing {}", self.knot_spacing)));
        }
        if self.degree == 0 || self.degree > 5 {
            return Err(Error::InvalidInput(format!("unsupported spline degree {}", self.degree)));
        }
        if !(self.epsilon > 0.0 && self.epsilon * (PORTS as f64) < 1.0) {
            return Err(Error::InvalidInput(format!("bad probability floor {}", self.epsilon)));
        }
        Ok(())
    }
}

/// Smooth map from acceleration (g) to the 7 marginal port probabilities of one axis.
///
/// Raw spline values `s_m(a)` are clipped at zero, normalized, and mixed with
/// the floor: `p_m = ε + (1 - 7ε) s⁺_m / Σ s⁺`, so every channel lies in `[ε, 1]`
/// and the channels sum to one.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EmpiricalModel {
    pub axis: Axis,
    pub degree: usize,
    pub knots: Vec<f64>,
    pub coefficients: Vec<Vec<f64>>,
    pub range: [f64; 2],
    pub epsilon: f64,
}

impl EmpiricalModel {
    fn basis(&self) -> BSplineBasis {
        BSplineBasis {
            degree: self.degree,
            knots: self.knots.clone(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let basis = self.basis();
        basis.validate()?;
        if self.coefficients.len() != PORTS || self.coefficients.iter().any(|c| c.len() != basis.len()) {
            return Err(Error::InvalidInput("model needs 7 coefficient arrays matching the knots".into()));
        }
        if self.coefficients.iter().flatten().any(|c| !c.is_finite()) {
            return Err(Error::NonFinite("model coefficient"));
        }
        if !(self.range[1] > self.range[0]) {
            return Err(Error::InvalidInput("empty model range".into()));
        }
        if !(self.epsilon > 0.0 && self.epsilon * (PORTS as f64) < 1.0) {
            return Err(Error::InvalidInput(format!("bad probability floor {}", self.epsilon)));
        }
        Ok(())
    }

    /// Model that returns `probabilities` for every acceleration.
    pub fn constant(axis: Axis, probabilities: [f64; PORTS], range: [f64; 2], epsilon: f64) -> Result<Self> {
        let basis = BSplineBasis::clamped(range[0], range[1], 1, 3)?;
        let n = basis.len();
        let m = Self {
            axis,
            degree: basis.degree,
            knots: basis.knots,
            coefficients: probabilities.iter().map(|&p| vec![p; n]).collect(),
            range,
            epsilon,
        };
        m.validate()?;
        Ok(m)
    }

    pub fn contains(&self, a: f64) -> bool {
        let tol = 1e-12 * (self.range[1] - self.range[0]);
        a >= self.range[0] - tol && a <= self.range[1] + tol
    }

    fn check(&self, a: f64) -> Result<()> {
        if !a.is_finite() {
            return Err(Error::NonFinite("acceleration"));
        }
        if !self.contains(a) {
            return Err(Error::Estimation(format!(
                "a = {a} g lies outside the {} model range [{}, {}]",
                self.axis.label(),
                self.range[0],
                self.range[1]
            )));
        }
        Ok(())
    }

    /// Raw spline values and slopes per channel.
    pub fn raw(&self, a: f64) -> ([f64; PORTS], [f64; PORTS]) {
        let basis = self.basis();
        let mut v = [0.0; PORTS];
        let mut d = [0.0; PORTS];
        for (m, c) in self.coefficients.iter().enumerate() {
            (v[m], d[m]) = basis.evaluate(c, a);
        }
        (v, d)
    }

    /// Floored, normalized channel probabilities and their analytic derivatives.
    pub fn eval_with_derivative(&self, a: f64) -> ([f64; PORTS], [f64; PORTS]) {
        let (raw, slope) = self.raw(a);
        let eps = self.epsilon;
        let scale = 1.0 - PORTS as f64 * eps;
        let mut pos = [0.0; PORTS];
        let mut dpos = [0.0; PORTS];
        for m in 0..PORTS {
            if raw[m] > 0.0 {
                pos[m] = raw[m];
                dpos[m] = slope[m];
            }
        }
        let s: f64 = pos.iter().sum();
        if !(s > 0.0) {
            return ([1.0 / PORTS as f64; PORTS], [0.0; PORTS]);
        }
        let ds: f64 = dpos.iter().sum();
        let mut p = [0.0; PORTS];
        let mut dp = [0.0; PORTS];
        for m in 0..PORTS {
            p[m] = eps + scale * pos[m] / s;
            dp[m] = scale * (dpos[m] * s - pos[m] * ds) / (s * s);
        }
        (p, dp)
    }

    pub fn probabilities(&self, a: f64) -> Result<[f64; PORTS]> {
        self.check(a)?;
        Ok(self.eval_with_derivative(a).0)
    }

    pub fn derivatives(&self, a: f64) -> Result<[f64; PORTS]> {
        self.check(a)?;
        Ok(self.eval_with_derivative(a).1)
    }

    /// Squared Euclidean distance between `observed` and the model at `a`.
    pub fn distance(&self, observed: &[f64; PORTS], a: f64) -> f64 {
        let (p, _) = self.eval_with_derivative(a);
        observed.iter().zip(&p).map(|(o, q)| (o - q).powi(2)).sum()
    }

    /// RMS difference between the model and per-point mean marginals.
    pub fn rms_residual(&self, points: &[(f64, [f64; PORTS])]) -> f64 {
        let total: f64 = points.iter().map(|(a, m)| self.distance(m, *a)).sum();
        (total / (points.len() * PORTS) as f64).sqrt()
    }

    /// Largest fraction of the range over which any single channel sits at the floor.
    pub fn floor_fraction(&self) -> f64 {
        let n = 401;
        let mut pinned = [0usize; PORTS];
        for i in 0..n {
            let a = self.range[0] + (self.range[1] - self.range[0]) * i as f64 / (n - 1) as f64;
            let (raw, _) = self.raw(a);
            for m in 0..PORTS {
                if raw[m] <= 0.0 {
                    pinned[m] += 1;
                }
            }
        }
        pinned.iter().copied().max().unwrap_or(0) as f64 / n as f64
    }

    /// Reads a model file; a top-level `metadata` block is ignored.
    pub fn read(path: impl AsRef<Path>) -> Result<Self> {
        let mut v: serde_json::Value = serde_json::from_reader(BufReader::new(std::fs::File::open(path)?))?;
        if let Some(obj) = v.as_object_mut() {
            obj.remove("metadata");
        }
        let m: Self = serde_json::from_value(v)?;
        m.validate()?;
        Ok(m)
    }

    pub fn write(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut f = std::fs::File::create(path)?;
        serde_json::to_writer_pretty(&mut f, self)?;
        writeln!(f)?;
        Ok(())
    }
}

/// The x and z models used together for vector estimation.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelPair {
    pub x: EmpiricalModel,
    pub z: EmpiricalModel,
}

impl ModelPair {
    pub fn get(&self, axis: Axis) -> &EmpiricalModel {
        match axis {
            Axis::X => &self.x,
            Axis::Z => &self.z,
        }
    }
}

/// Shots recorded at one applied acceleration.
#[derive(Clone, Debug, PartialEq)]
pub struct CalibrationEntry {
    pub accel: AccelerationVector,
    pub shots: Vec<ShotRecord>,
}

impl CalibrationEntry {
    /// Shot-averaged marginal for `axis`.
    pub fn mean_marginal(&self, axis: Axis) -> Result<[f64; PORTS]> {
        if self.shots.is_empty() {
            return Err(Error::InsufficientData("calibration entry without shots".into()));
        }
        let mut acc = [0.0; PORTS];
        for shot in &self.shots {
            let (mx, mz) = shot_marginals(shot)?;
            let m = if axis == Axis::X { mx } else { mz };
            acc.iter_mut().zip(m).for_each(|(a, v)| *a += v);
        }
        let n = self.shots.len() as f64;
        Ok(acc.map(|a| a / n))
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct CalibrationSet {
    pub entries: Vec<CalibrationEntry>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ManifestEntry {
    a_x: f64,
    a_z: f64,
    shots: Vec<String>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Manifest {
    entries: Vec<ManifestEntry>,
}

const MANIFEST: &str = "manifest.json";

impl CalibrationSet {
    pub fn validate(&self) -> Result<()> {
        for axis in [Axis::X, Axis::Z] {
            let mut values: Vec<f64> = self.entries.iter().map(|e| e.accel.component(axis)).collect();
            values.sort_by(f64::total_cmp);
            values.dedup();
            if values.len() < 2 {
                return Err(Error::InsufficientData(format!(
                    "need at least two distinct {} accelerations",
                    axis.label()
                )));
            }
        }
        if self.entries.iter().any(|e| e.shots.is_empty()) {
            return Err(Error::InsufficientData("every calibration point needs a shot".into()));
        }
        Ok(())
    }

    /// Sorted (a, mean marginal) pairs for `axis`; duplicate accelerations are rejected.
    pub fn points(&self, axis: Axis) -> Result<Vec<(f64, [f64; PORTS])>> {
        let mut pts = self
            .entries
            .iter()
            .map(|e| Ok((e.accel.component(axis), e.mean_marginal(axis)?)))
            .collect::<Result<Vec<_>>>()?;
        pts.sort_by(|a, b| a.0.total_cmp(&b.0));
        if pts.windows(2).any(|w| w[1].0 - w[0].0 <= 1e-12) {
            return Err(Error::InvalidInput(format!(
                "calibration accelerations along {} must be distinct",
                axis.label()
            )));
        }
        Ok(pts)
    }

    /// Writes one JSON file per shot plus `manifest.json` into `dir`.
    pub fn save_dir(&self, dir: impl AsRef<Path>) -> Result<()> {
        let dir = dir.as_ref();
        std::fs::create_dir_all(dir)?;
        let mut entries = Vec::with_capacity(self.entries.len());
        for (i, e) in self.entries.iter().enumerate() {
            let mut names = Vec::with_capacity(e.shots.len());
            for (k, shot) in e.shots.iter().enumerate() {
                let name = format!("shot_{i:03}_{k:03}.json");
                shot.write(dir.join(&name))?;
                names.push(name);
            }
            entries.push(ManifestEntry {
                a_x: e.accel.a_x,
                a_z: e.accel.a_z,
                shots: names,
            });
        }
        let mut f = std::fs::File::create(dir.join(MANIFEST))?;
        serde_json::to_writer_pretty(&mut f, &Manifest { entries })?;
        writeln!(f)?;
        Ok(())
    }

    pub fn load_dir(dir: impl AsRef<Path>) -> Result<Self> {
        let dir: PathBuf = dir.as_ref().to_path_buf();
        let manifest: Manifest =
            serde_json::from_reader(BufReader::new(std::fs::File::open(dir.join(MANIFEST))?))?;
        let entries = manifest
            .entries
            .into_iter()
            .map(|e| {
                Ok(CalibrationEntry {
                    accel: AccelerationVector::new(e.a_x, e.a_z)?,
                    shots: e
                        .shots
                        .iter()
                        .map(|name| ShotRecord::read(dir.join(name)))
                        .collect::<Result<_>>()?,
                })
            })
            .collect::<Result<_>>()?;
        let set = Self { entries };
        set.validate()?;
        Ok(set)
    }
}

/// Fits the per-axis empirical model to the shot-averaged marginals.
pub fn build_empirical_model(cal: &CalibrationSet, axis: Axis, config: &SplineConfig) -> Result<EmpiricalModel> {
    config.validate()?;
    cal.validate()?;
    let pts = cal.points(axis)?;
    build_model_from_points(&pts, axis, config)
}

/// Fits a model to (a, mean marginal) pairs.
pub fn build_model_from_points(
    pts: &[(f64, [f64; PORTS])],
    axis: Axis,
    config: &SplineConfig,
) -> Result<EmpiricalModel> {
    config.validate()?;
    if pts.len() < 2 {
        return Err(Error::InsufficientData("need at least two calibration points".into()));
    }
    let lo = pts[0].0;
    let hi = pts[pts.len() - 1].0;
    let intervals = (((hi - lo) / config.knot_spacing).round() as usize).max(1);
    let basis = BSplineBasis::clamped(lo, hi, intervals, config.degree)?;
    let xs: Vec<f64> = pts.iter().map(|p| p.0).collect();
    let ys: Vec<Vec<f64>> = (0..PORTS).map(|m| pts.iter().map(|p| p.1[m]).collect()).collect();
    let coefficients = basis.fit(&xs, &ys)?;
    let model = EmpiricalModel {
        axis,
        degree: basis.degree,
        knots: basis.knots,
        coefficients,
        range: [lo, hi],
        epsilon: config.epsilon,
    };
    model.validate()?;
    Ok(model)
}

/// Least-squares estimate of one axis plus its residual.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AxisEstimate {
    pub a: f64,
    pub residual: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LeastSquaresEstimate {
    pub accel: AccelerationVector,
    /// Sum of the two per-axis squared distances.
    pub residual: f64,
    pub x: AxisEstimate,
    pub z: AxisEstimate,
}

/// Default number of scan points for least-squares estimation.
pub const LS_SCAN_POINTS: usize = 2001;

fn check_marginal(m: &[f64; PORTS]) -> Result<()> {
    if m.iter().any(|v| !v.is_finite() || *v < 0.0) {
        return Err(Error::InvalidInput("marginal entries must be finite and non-negative".into()));
    }
    let total: f64 = m.iter().sum();
    if (total - 1.0).abs() > 1e-9 {
        return Err(Error::InvalidInput(format!("marginal sums to {total}, not 1")));
    }
    Ok(())
}

/// Dense scan then successive parabolic refinement of the squared distance.
pub fn least_squares_axis(observed: &[f64; PORTS], model: &EmpiricalModel, scan_points: usize) -> Result<AxisEstimate> {
    check_marginal(observed)?;
    let n = scan_points.max(3);
    let [lo, hi] = model.range;
    let grid: Vec<f64> = (0..n).map(|i| lo + (hi - lo) * i as f64 / (n - 1) as f64).collect();
    let f = |a: f64| model.distance(observed, a);
    let values: Vec<f64> = grid.iter().map(|&a| f(a)).collect();
    let mut best = 0;
    for i in 1..n {
        let tie = (values[i] - values[best]).abs() <= 1e-15 * values[best].max(1e-300);
        if values[i] < values[best] && !tie || tie && grid[i].abs() < grid[best].abs() {
            best = i;
        }
    }
    if best == 0 || best == n - 1 {
        return Ok(AxisEstimate {
            a: grid[best],
            residual: values[best],
        });
    }
    let (mut l, mut m, mut r) = (grid[best - 1], grid[best], grid[best + 1]);
    let (mut fl, mut fm, mut fr) = (values[best - 1], values[best], values[best + 1]);
    for _ in 0..60 {
        let num = (m - l).powi(2) * (fm - fr) - (m - r).powi(2) * (fm - fl);
        let den = (m - l) * (fm - fr) - (m - r) * (fm - fl);
        if den == 0.0 {
            break;
        }
        let v = m - 0.5 * num / den;
        if !(v > l && v < r) || (v - m).abs() < 1e-15 {
            break;
        }
        let fv = f(v);
        if fv < fm {
            if v < m {
                (r, fr) = (m, fm);
            } else {
                (l, fl) = (m, fm);
            }
            (m, fm) = (v, fv);
        } else if v < m {
            (l, fl) = (v, fv);
        } else {
            (r, fr) = (v, fv);
        }
        if r - l < 1e-13 {
            break;
        }
    }
    Ok(AxisEstimate { a: m, residual: fm })
}

/// Per-axis argmin of the Euclidean distance between observed marginals and the model.
pub fn least_squares_estimate(
    marginals: (&[f64; PORTS], &[f64; PORTS]),
    models: &ModelPair,
) -> Result<LeastSquaresEstimate> {
    let x = least_squares_axis(marginals.0, &models.x, LS_SCAN_POINTS)?;
    let z = least_squares_axis(marginals.1, &models.z, LS_SCAN_POINTS)?;
    Ok(LeastSquaresEstimate {
        accel: AccelerationVector::new(x.a, z.a)?,
        residual: x.residual + z.residual,
        x,
        z,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    /// Smooth synthetic channel curves over [-0.2, 0.2].
    pub(crate) fn toy_marginal(a: f64) -> [f64; PORTS] {
        let mut w = [0.0; PORTS];
        for (m, v) in w.iter_mut().enumerate() {
            let c = (m as f64 - 3.0) * 0.06;
            *v = (-(a - c).powi(2) / 0.01).exp() + 0.02;
        }
        let s: f64 = w.iter().sum();
        w.map(|v| v / s)
    }

    fn toy_points() -> Vec<(f64, [f64; PORTS])> {
        (0..41).map(|i| {
            let a = -0.2 + 0.01 * i as f64;
            (a, toy_marginal(a))
        })
        .collect()
    }

    #[test]
    fn marginals_of_outer_products() {
        let u = [0.1, 0.2, 0.3, 0.1, 0.1, 0.1, 0.1];
        let v = [0.0, 0.0, 0.5, 0.5, 0.0, 0.0, 0.0];
        let (mx, mz) = marginalize(&MomentumGrid::outer(&u, &v));
        for i in 0..PORTS {
            assert_abs_diff_eq!(mx[i], u[i], epsilon = 1e-15);
            assert_abs_diff_eq!(mz[i], v[i], epsilon = 1e-15);
        }
        let (dx, dz) = marginalize(&MomentumGrid::delta_center());
        assert_eq!(dx[3], 1.0);
        assert_eq!(dz[3], 1.0);
    }

    #[test]
    fn constant_data_gives_constant_model() {
        let c = [0.05, 0.1, 0.2, 0.3, 0.2, 0.1, 0.05];
        let pts: Vec<_> = (0..41).map(|i| (-0.2 + 0.01 * i as f64, c)).collect();
        let m = build_model_from_points(&pts, Axis::X, &SplineConfig::default()).unwrap();
        for a in [-0.2, -0.033, 0.0, 0.17, 0.2] {
            let (p, d) = m.eval_with_derivative(a);
            for k in 0..PORTS {
                assert_abs_diff_eq!(p[k], 1e-4 + (1.0 - 7e-4) * c[k], epsilon = 1e-10);
                assert_abs_diff_eq!(d[k], 0.0, epsilon = 1e-8);
            }
        }
    }

    #[test]
    fn model_reproduces_calibration_points() {
        let pts = toy_points();
        let m = build_model_from_points(&pts, Axis::Z, &SplineConfig::default()).unwrap();
        assert!(m.rms_residual(&pts) < 0.02);
        assert!(m.floor_fraction() < 0.5);
        for i in 0..=200 {
            let a = -0.2 + 0.002 * i as f64;
            let p = m.probabilities(a).unwrap();
            assert_abs_diff_eq!(p.iter().sum::<f64>(), 1.0, epsilon = 1e-12);
            assert!(p.iter().all(|&v| (1e-4..=1.0).contains(&v)));
        }
        assert!(m.probabilities(0.3).is_err());
    }

    #[test]
    fn derivative_matches_finite_difference() {
        let m = build_model_from_points(&toy_points(), Axis::X, &SplineConfig::default()).unwrap();
        for a in [-0.15, -0.01, 0.07, 0.13] {
            let d = m.derivatives(a).unwrap();
            let h = 1e-6;
            let (p1, p0) = (m.probabilities(a + h).unwrap(), m.probabilities(a - h).unwrap());
            for k in 0..PORTS {
                assert_abs_diff_eq!(d[k], (p1[k] - p0[k]) / (2.0 * h), epsilon = 1e-5);
            }
        }
    }

    #[test]
    fn least_squares_recovers_model_points() {
        let m = build_model_from_points(&toy_points(), Axis::X, &SplineConfig::default()).unwrap();
        let pair = ModelPair {
            x: m.clone(),
            z: EmpiricalModel { axis: Axis::Z, ..m.clone() },
        };
        for (ax, az) in [(-0.123, 0.05), (0.0, 0.0), (0.1987, -0.0711)] {
            let px = m.probabilities(ax).unwrap();
            let pz = m.probabilities(az).unwrap();
            let est = least_squares_estimate((&px, &pz), &pair).unwrap();
            assert_abs_diff_eq!(est.accel.a_x, ax, epsilon = 1e-7);
            assert_abs_diff_eq!(est.accel.a_z, az, epsilon = 1e-7);
            assert!(est.residual < 1e-14);
        }
        let bad = [0.5; PORTS];
        assert!(least_squares_estimate((&bad, &bad), &pair).is_err());
    }

    #[test]
    fn ties_prefer_small_magnitude() {
        let m = EmpiricalModel::constant(Axis::X, [1.0 / 7.0; PORTS], [-0.2, 0.2], 1e-4).unwrap();
        let est = least_squares_axis(&[1.0 / 7.0; PORTS], &m, LS_SCAN_POINTS).unwrap();
        assert_eq!(est.a, 0.0);
    }

    #[test]
    fn too_few_points_for_the_spline() {
        let pts: Vec<_> = toy_points().into_iter().step_by(20).collect();
        assert_eq!(pts.len(), 3);
        assert!(matches!(
            build_model_from_points(&pts, Axis::X, &SplineConfig::default()),
            Err(Error::InsufficientData(_))
        ));
    }

    #[test]
    fn calibration_directory_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let grid = MomentumGrid::delta_center();
        let set = CalibrationSet {
            entries: vec![
                CalibrationEntry {
                    accel: AccelerationVector::new(-0.1, -0.1).unwrap(),
                    shots: vec![ShotRecord::from_grid(&grid, 1)],
                },
                CalibrationEntry {
                    accel: AccelerationVector::new(0.1, 0.1).unwrap(),
                    shots: vec![ShotRecord::from_grid(&grid, 2), ShotRecord::from_grid(&grid, 3)],
                },
            ],
        };
        set.save_dir(dir.path()).unwrap();
        assert_eq!(CalibrationSet::load_dir(dir.path()).unwrap(), set);
    }
}

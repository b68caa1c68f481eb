//! Static optical-lattice physics in the plane-wave basis.
//!
//! States live on the momentum ladder `|q + 2j⟩` (units of ħk) for
//! `j ∈ [-J, J]`. Internally ħ = 1, energies are in recoil energies E_r,
//! momenta in ħk and time in ħ/E_r; [`PhysicalConfig`] converts to SI.

use nalgebra::{DMatrix, SymmetricEigen};
use num_complex::Complex64;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Reduced Planck constant (J s).
pub const HBAR: f64 = 1.054_571_817e-34;
/// Unified atomic mass unit (kg).
pub const ATOMIC_MASS_UNIT: f64 = 1.660_539_066_60e-27;
/// Rubidium-87 atomic mass in unified atomic mass units.
pub const RB87_MASS_U: f64 = 86.909_180_527;
/// Standard gravity (m/s^2).
pub const STANDARD_GRAVITY: f64 = 9.806_65;

/// Number of readout ports per axis (momenta -6ħk..+6ħk).
pub const PORTS: usize = 7;
/// Largest ladder index that is read out, `PORTS = 2 * PORT_REACH + 1`.
pub const PORT_REACH: i32 = 3;
/// Default plane-wave truncation.
pub const DEFAULT_TRUNCATION: usize = 8;
/// Smallest truncation accepted by [`LatticeConfig::new`].
pub const MIN_TRUNCATION: usize = 5;

const LEAKAGE_FLAG: f64 = 0.05;
const CONVERGENCE_BANDS: usize = 5;
const CONVERGENCE_TOL: f64 = 1e-8;
const DEGENERACY_TOL: f64 = 1e-9;

/// Laser and atom parameters, in SI units.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PhysicalConfig {
    /// Lattice laser wavelength (m).
    pub wavelength: f64,
    /// Atomic mass (kg).
    pub atom_mass: f64,
    /// Reference acceleration g (m/s^2).
    pub gravity_g: f64,
}

impl Default for PhysicalConfig {
    fn default() -> Self {
        Self::rubidium_87_1064nm()
    }
}

impl PhysicalConfig {
    pub fn new(wavelength: f64, atom_mass: f64, gravity_g: f64) -> Result<Self> {
        let cfg = Self {
            wavelength,
            atom_mass,
            gravity_g,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    /// Rubidium-87 in a 1064 nm lattice under standard gravity.
    pub fn rubidium_87_1064nm() -> Self {
        Self {
            wavelength: 1064e-9,
            atom_mass: RB87_MASS_U * ATOMIC_MASS_UNIT,
            gravity_g: STANDARD_GRAVITY,
        }
    }

    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("wavelength", self.wavelength),
            ("atom_mass", self.atom_mass),
            ("gravity_g", self.gravity_g),
        ] {
            if !v.is_finite() || v <= 0.0 {
                return Err(Error::InvalidInput(format!("{name} must be positive, got {v}")));
            }
        }
        Ok(())
    }

    /// Lattice wavenumber k = 2π/λ (1/m).
    pub fn wavenumber(&self) -> f64 {
        2.0 * std::f64::consts::PI / self.wavelength
    }

    /// Recoil energy ħ²k²/2m (J).
    pub fn recoil_energy(&self) -> f64 {
        let k = self.wavenumber();
        HBAR * HBAR * k * k / (2.0 * self.atom_mass)
    }

    /// Natural time unit ħ/E_r (s).
    pub fn recoil_time(&self) -> f64 {
        HBAR / self.recoil_energy()
    }

    /// Single-photon recoil velocity ħk/m (m/s).
    pub fn recoil_velocity(&self) -> f64 {
        HBAR * self.wavenumber() / self.atom_mass
    }

    /// Converts microseconds to ħ/E_r.
    pub fn micros_to_natural(&self, micros: f64) -> f64 {
        micros * 1e-6 / self.recoil_time()
    }

    /// Converts ħ/E_r to microseconds.
    pub fn natural_to_micros(&self, t: f64) -> f64 {
        t * self.recoil_time() * 1e6
    }

    /// Quasimomentum drift rate dq/dt in ħk per ħ/E_r for an acceleration in units of g.
    pub fn drift_rate(&self, accel_g: f64) -> f64 {
        let force = self.atom_mass * accel_g * self.gravity_g;
        force / (HBAR * self.wavenumber()) * self.recoil_time()
    }

    /// Bloch period 2ħk/(m a) in seconds. Infinite for zero acceleration.
    pub fn bloch_period(&self, accel_g: f64) -> f64 {
        2.0 * HBAR * self.wavenumber() / (self.atom_mass * accel_g.abs() * self.gravity_g)
    }

    /// Inverse of [`Self::bloch_period`]: acceleration magnitude in g.
    pub fn accel_from_bloch_period(&self, period_s: f64) -> f64 {
        2.0 * HBAR * self.wavenumber() / (self.atom_mass * period_s * self.gravity_g)
    }
}

/// Lattice depth, truncation and physical constants.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LatticeConfig {
    /// Depth V0 in recoil energies.
    pub depth: f64,
    /// Largest plane-wave index J; the basis has 2J+1 states.
    pub truncation: usize,
    pub physical: PhysicalConfig,
}

impl LatticeConfig {
    pub fn new(depth: f64, truncation: usize, physical: PhysicalConfig) -> Result<Self> {
        let cfg = Self {
            depth,
            truncation,
            physical,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    /// Rb-87, 1064 nm, default truncation.
    pub fn with_depth(depth: f64) -> Result<Self> {
        Self::new(depth, DEFAULT_TRUNCATION, PhysicalConfig::default())
    }

    pub fn validate(&self) -> Result<()> {
        if !self.depth.is_finite() || self.depth < 0.0 {
            return Err(Error::InvalidInput(format!(
                "depth must be non-negative, got {}",
                self.depth
            )));
        }
        if self.truncation < MIN_TRUNCATION {
            return Err(Error::InvalidInput(format!(
                "truncation must be at least {MIN_TRUNCATION}, got {}",
                self.truncation
            )));
        }
        self.physical.validate()
    }

    pub fn dim(&self) -> usize {
        2 * self.truncation + 1
    }

    pub fn with_truncation(&self, truncation: usize) -> Self {
        Self { truncation, ..*self }
    }

    pub fn with_lattice_depth(&self, depth: f64) -> Self {
        Self { depth, ..*self }
    }
}

/// Band index and quasimomentum (ħk units) of a Bloch state.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct BlochIndex {
    pub band: usize,
    pub quasimomentum: f64,
}

impl BlochIndex {
    pub fn new(band: usize, quasimomentum: f64) -> Self {
        Self {
            band,
            quasimomentum,
        }
    }

    pub fn ground() -> Self {
        Self::new(0, 0.0)
    }

    fn validate(&self, config: &LatticeConfig) -> Result<()> {
        if !self.quasimomentum.is_finite() {
            return Err(Error::NonFinite("quasimomentum"));
        }
        if self.quasimomentum.abs() > 1.0 {
            return Err(Error::InvalidInput(format!(
                "quasimomentum {} outside [-1, 1]",
                self.quasimomentum
            )));
        }
        if self.band >= config.dim() {
            return Err(Error::InvalidInput(format!(
                "band {} outside basis of dimension {}",
                self.band,
                config.dim()
            )));
        }
        Ok(())
    }
}

/// Complex amplitudes on the ladder `|q + 2j⟩`, `j ∈ [-J, J]`.
#[derive(Clone, Debug, PartialEq)]
pub struct MomentumWavefunction {
    quasimomentum: f64,
    amplitudes: Vec<Complex64>,
}

impl MomentumWavefunction {
    /// Wraps amplitudes that are already normalized (to 1e-10).
    pub fn new(quasimomentum: f64, amplitudes: Vec<Complex64>) -> Result<Self> {
        let psi = Self::from_raw(quasimomentum, amplitudes)?;
        let norm = psi.norm_sqr();
        if (norm - 1.0).abs() > 1e-10 {
            return Err(Error::InvalidInput(format!("state norm {norm} is not 1")));
        }
        Ok(psi)
    }

    /// Normalizes the amplitudes before wrapping them.
    pub fn normalized(quasimomentum: f64, mut amplitudes: Vec<Complex64>) -> Result<Self> {
        let norm = amplitudes.iter().map(|c| c.norm_sqr()).sum::<f64>().sqrt();
        if !(norm > 0.0) {
            return Err(Error::InvalidInput("zero state cannot be normalized".into()));
        }
        amplitudes.iter_mut().for_each(|c| *c /= norm);
        Self::from_raw(quasimomentum, amplitudes)
    }

    fn from_raw(quasimomentum: f64, amplitudes: Vec<Complex64>) -> Result<Self> {
        if amplitudes.len() % 2 == 0 || amplitudes.len() < 2 * MIN_TRUNCATION + 1 {
            return Err(Error::InvalidInput(format!(
                "ladder length {} must be odd and at least {}",
                amplitudes.len(),
                2 * MIN_TRUNCATION + 1
            )));
        }
        if !quasimomentum.is_finite() {
            return Err(Error::NonFinite("quasimomentum"));
        }
        if amplitudes.iter().any(|c| !c.re.is_finite() || !c.im.is_finite()) {
            return Err(Error::NonFinite("amplitudes"));
        }
        Ok(Self {
            quasimomentum,
            amplitudes,
        })
    }

    /// The plane wave `|q + 2j⟩`.
    pub fn plane_wave(quasimomentum: f64, truncation: usize, j: i32) -> Result<Self> {
        let mut amps = vec![Complex64::new(0.0, 0.0); 2 * truncation + 1];
        let idx = j + truncation as i32;
        if idx < 0 || idx as usize >= amps.len() {
            return Err(Error::InvalidInput(format!("index {j} outside truncation {truncation}")));
        }
        amps[idx as usize] = Complex64::new(1.0, 0.0);
        Self::new(quasimomentum, amps)
    }

    pub fn quasimomentum(&self) -> f64 {
        self.quasimomentum
    }

    pub fn amplitudes(&self) -> &[Complex64] {
        &self.amplitudes
    }

    pub(crate) fn amplitudes_mut(&mut self) -> &mut [Complex64] {
        &mut self.amplitudes
    }

    pub(crate) fn set_quasimomentum(&mut self, q: f64) {
        self.quasimomentum = q;
    }

    pub fn truncation(&self) -> usize {
        self.amplitudes.len() / 2
    }

    pub fn dim(&self) -> usize {
        self.amplitudes.len()
    }

    /// Amplitude of ladder index `j`, zero outside the truncation.
    pub fn amplitude(&self, j: i32) -> Complex64 {
        let idx = j + self.truncation() as i32;
        if idx < 0 || idx as usize >= self.amplitudes.len() {
            Complex64::new(0.0, 0.0)
        } else {
            self.amplitudes[idx as usize]
        }
    }

    pub fn norm_sqr(&self) -> f64 {
        self.amplitudes.iter().map(|c| c.norm_sqr()).sum()
    }

    /// `⟨self|other⟩`.
    pub fn inner(&self, other: &Self) -> Result<Complex64> {
        if self.dim() != other.dim() {
            return Err(Error::DimensionMismatch {
                expected: self.dim(),
                got: other.dim(),
            });
        }
        Ok(self
            .amplitudes
            .iter()
            .zip(&other.amplitudes)
            .map(|(a, b)| a.conj() * b)
            .sum())
    }

    /// State in a lattice displaced by phase `delta`: `c_j -> e^{i j delta} c_j`.
    pub fn gauge_shifted(&self, delta: f64) -> Self {
        let j0 = self.truncation() as f64;
        let amplitudes = self
            .amplitudes
            .iter()
            .enumerate()
            .map(|(i, c)| c * Complex64::from_polar(1.0, (i as f64 - j0) * delta))
            .collect();
        Self {
            quasimomentum: self.quasimomentum,
            amplitudes,
        }
    }

    /// Momentum reversal `c_j -> c_{-j}`, `q -> -q`.
    pub fn momentum_reversed(&self) -> Self {
        let mut amplitudes = self.amplitudes.clone();
        amplitudes.reverse();
        Self {
            quasimomentum: -self.quasimomentum,
            amplitudes,
        }
    }

    /// Multiplies every amplitude by `e^{i alpha}`.
    pub fn with_global_phase(&self, alpha: f64) -> Self {
        let p = Complex64::from_polar(1.0, alpha);
        Self {
            quasimomentum: self.quasimomentum,
            amplitudes: self.amplitudes.iter().map(|c| c * p).collect(),
        }
    }
}

/// Energies `E_n(q)` in recoil units on a quasimomentum grid.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BandStructure {
    pub q_grid: Vec<f64>,
    /// `energies[i][n]` is band `n` at `q_grid[i]`, ascending in `n`.
    pub energies: Vec<Vec<f64>>,
    /// Largest change of the lowest bands when the truncation is doubled.
    pub truncation_error: f64,
    pub converged: bool,
}

impl BandStructure {
    pub fn band(&self, n: usize) -> Vec<f64> {
        self.energies.iter().map(|row| row[n]).collect()
    }
}

fn check_finite(q: f64, phase: f64) -> Result<()> {
    if !q.is_finite() {
        return Err(Error::NonFinite("quasimomentum"));
    }
    if !phase.is_finite() {
        return Err(Error::NonFinite("phase"));
    }
    Ok(())
}

/// Lattice Hamiltonian at quasimomentum `q` and standing-wave phase `phase`.
///
/// Diagonal `(q + 2j)^2`; `H[j, j+1] = (V0/4) e^{-i phase}` and its conjugate below.
pub fn build_hamiltonian(config: &LatticeConfig, q: f64, phase: f64) -> Result<DMatrix<Complex64>> {
    check_finite(q, phase)?;
    config.validate()?;
    if q.abs() > 1.0 {
        return Err(Error::InvalidInput(format!("quasimomentum {q} outside [-1, 1]")));
    }
    let dim = config.dim();
    let jmax = config.truncation as f64;
    let coupling = Complex64::from_polar(config.depth / 4.0, -phase);
    let mut h = DMatrix::from_element(dim, dim, Complex64::new(0.0, 0.0));
    for i in 0..dim {
        let p = q + 2.0 * (i as f64 - jmax);
        h[(i, i)] = Complex64::new(p * p, 0.0);
        if i + 1 < dim {
            h[(i, i + 1)] = coupling;
            h[(i + 1, i)] = coupling.conj();
        }
    }
    Ok(h)
}

/// Real-symmetric Hamiltonian at phase zero. `q` is not range-checked.
pub(crate) fn real_hamiltonian(depth: f64, truncation: usize, q: f64) -> DMatrix<f64> {
    let dim = 2 * truncation + 1;
    let jmax = truncation as f64;
    let mut h = DMatrix::zeros(dim, dim);
    for i in 0..dim {
        let p = q + 2.0 * (i as f64 - jmax);
        h[(i, i)] = p * p;
        if i + 1 < dim {
            h[(i, i + 1)] = depth / 4.0;
            h[(i + 1, i)] = depth / 4.0;
        }
    }
    h
}

/// Eigenpairs sorted by ascending energy.
#[derive(Clone, Debug)]
pub(crate) struct Spectrum {
    pub values: Vec<f64>,
    /// Column `n` is the eigenvector of band `n`.
    pub vectors: DMatrix<f64>,
}

pub(crate) fn spectrum(depth: f64, truncation: usize, q: f64) -> Spectrum {
    let eig = SymmetricEigen::new(real_hamiltonian(depth, truncation, q));
    let dim = eig.eigenvalues.len();
    let mut order: Vec<usize> = (0..dim).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[a].total_cmp(&eig.eigenvalues[b]));
    let values = order.iter().map(|&i| eig.eigenvalues[i]).collect();
    let mut vectors = DMatrix::zeros(dim, dim);
    for (col, &i) in order.iter().enumerate() {
        vectors.set_column(col, &eig.eigenvectors.column(i));
    }
    Spectrum { values, vectors }
}

fn band_energies(depth: f64, truncation: usize, q: f64) -> Vec<f64> {
    spectrum(depth, truncation, q).values
}

/// Diagonalizes the lattice Hamiltonian on every point of `q_grid`.
///
/// The lowest five bands are recomputed at twice the truncation; the largest
/// difference is reported in `truncation_error` and `converged` is cleared
/// when it exceeds 1e-8 E_r.
pub fn solve_bands(config: &LatticeConfig, q_grid: &[f64]) -> Result<BandStructure> {
    config.validate()?;
    for &q in q_grid {
        check_finite(q, 0.0)?;
        if q.abs() > 1.0 {
            return Err(Error::InvalidInput(format!("quasimomentum {q} outside [-1, 1]")));
        }
    }
    let mut energies = Vec::with_capacity(q_grid.len());
    let mut truncation_error: f64 = 0.0;
    let nb = CONVERGENCE_BANDS.min(config.dim());
    for &q in q_grid {
        let e = band_energies(config.depth, config.truncation, q);
        let fine = band_energies(config.depth, 2 * config.truncation, q);
        for n in 0..nb {
            truncation_error = truncation_error.max((e[n] - fine[n]).abs());
        }
        energies.push(e);
    }
    Ok(BandStructure {
        q_grid: q_grid.to_vec(),
        energies,
        truncation_error,
        converged: truncation_error < CONVERGENCE_TOL,
    })
}

/// Diagnostics attached to a Bloch eigenvector.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct BlochDiagnostics {
    pub energy: f64,
    /// The band was degenerate and its vector was fixed by spatial parity.
    pub parity_resolved: bool,
}

/// Normalized Bloch eigenvector, largest amplitude real and positive.
pub fn bloch_state(config: &LatticeConfig, index: BlochIndex) -> Result<MomentumWavefunction> {
    bloch_state_with_diagnostics(config, index).map(|(psi, _)| psi)
}

pub fn bloch_state_with_diagnostics(
    config: &LatticeConfig,
    index: BlochIndex,
) -> Result<(MomentumWavefunction, BlochDiagnostics)> {
    config.validate()?;
    index.validate(config)?;
    let q = index.quasimomentum;
    let spec = spectrum(config.depth, config.truncation, q);
    let dim = config.dim();
    let n = index.band;

    let mut lo = n;
    while lo > 0 && (spec.values[lo] - spec.values[lo - 1]).abs() < DEGENERACY_TOL {
        lo -= 1;
    }
    let mut hi = n;
    while hi + 1 < dim && (spec.values[hi + 1] - spec.values[hi]).abs() < DEGENERACY_TOL {
        hi += 1;
    }

    let (mut vec, parity_resolved) = if hi > lo {
        match parity_map(q, config.truncation) {
            Some(map) => (parity_resolve(&spec.vectors, lo, hi, n, &map), true),
            None => (spec.vectors.column(n).iter().copied().collect(), false),
        }
    } else {
        (spec.vectors.column(n).iter().copied().collect::<Vec<f64>>(), false)
    };

    fix_sign(&mut vec);
    let amps = vec.into_iter().map(|x| Complex64::new(x, 0.0)).collect();
    let psi = MomentumWavefunction::normalized(q, amps)?;
    Ok((
        psi,
        BlochDiagnostics {
            energy: spec.values[n],
            parity_resolved,
        },
    ))
}

/// Index permutation implementing spatial parity on the ladder, when `q` admits one.
fn parity_map(q: f64, truncation: usize) -> Option<Vec<usize>> {
    let dim = 2 * truncation + 1;
    let jmax = truncation as i64;
    // Parity sends momentum q+2j to -(q+2j) = q + 2j', so j' = -j - q.
    let shift = if q == 0.0 {
        0
    } else if q == 1.0 {
        1
    } else if q == -1.0 {
        -1
    } else {
        return None;
    };
    Some(
        (0..dim)
            .map(|i| {
                let j = i as i64 - jmax;
                let jp = -j - shift;
                // The partner of an edge index can fall outside the ladder; keep it fixed.
                if jp.abs() > jmax {
                    i
                } else {
                    (jp + jmax) as usize
                }
            })
            .collect(),
    )
}

/// Within the degenerate block `lo..=hi`, returns parity eigenvectors, even first.
fn parity_resolve(vectors: &DMatrix<f64>, lo: usize, hi: usize, n: usize, map: &[usize]) -> Vec<f64> {
    let k = hi - lo + 1;
    let dim = vectors.nrows();
    let mut p = DMatrix::<f64>::zeros(k, k);
    for a in 0..k {
        for b in 0..k {
            let mut s = 0.0;
            for i in 0..dim {
                s += vectors[(i, lo + a)] * vectors[(map[i], lo + b)];
            }
            p[(a, b)] = s;
        }
    }
    let p = (&p + p.transpose()) * 0.5;
    let eig = SymmetricEigen::new(p);
    let mut order: Vec<usize> = (0..k).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]));
    let coeffs = eig.eigenvectors.column(order[n - lo]);
    (0..dim)
        .map(|i| (0..k).map(|a| coeffs[a] * vectors[(i, lo + a)]).sum())
        .collect()
}

/// Makes the largest-magnitude amplitude positive; near-ties resolve to the lowest index.
fn fix_sign(v: &mut [f64]) {
    let max = v.iter().fold(0.0f64, |m, x| m.max(x.abs()));
    if max == 0.0 {
        return;
    }
    let pivot = v
        .iter()
        .position(|x| x.abs() >= max * (1.0 - 1e-9))
        .unwrap_or(0);
    if v[pivot] < 0.0 {
        v.iter_mut().for_each(|x| *x = -*x);
    }
}

/// Readout of the seven central ladder indices.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PortPopulations {
    /// Renormalized probabilities for ports j = -3..=3.
    pub probabilities: [f64; PORTS],
    /// Raw probability outside |j| ≤ 3 before renormalization.
    pub leakage: f64,
}

impl PortPopulations {
    /// Set when more than 5% of the probability falls outside the window.
    pub fn leakage_flagged(&self) -> bool {
        self.leakage > LEAKAGE_FLAG
    }

    pub fn port(&self, j: i32) -> f64 {
        self.probabilities[(j + PORT_REACH) as usize]
    }

    /// Probabilities with ports mirrored `j -> -j`.
    pub fn mirrored(&self) -> [f64; PORTS] {
        let mut p = self.probabilities;
        p.reverse();
        p
    }

    pub fn delta(j: i32) -> Self {
        let mut probabilities = [0.0; PORTS];
        probabilities[(j + PORT_REACH) as usize] = 1.0;
        Self {
            probabilities,
            leakage: 0.0,
        }
    }
}

/// Port populations `|c_j|^2` for `|j| ≤ 3`, renormalized, with the leakage reported.
///
/// Up to `1e-3` of norm may already be missing (dropped off the ladder edge); it counts as leakage.
pub fn momentum_populations(psi: &MomentumWavefunction) -> Result<PortPopulations> {
    let norm = psi.norm_sqr();
    if !(norm > 1.0 - 1e-3 && norm < 1.0 + 1e-6) {
        return Err(Error::InvalidInput(format!("state norm {norm} is not 1")));
    }
    let mut probabilities = [0.0; PORTS];
    for (slot, j) in probabilities.iter_mut().zip(-PORT_REACH..=PORT_REACH) {
        *slot = psi.amplitude(j).norm_sqr();
    }
    let inside: f64 = probabilities.iter().sum();
    let leakage = (1.0 - inside).max(0.0);
    if inside <= 0.0 {
        return Err(Error::Convergence("no probability inside the readout window".into()));
    }
    probabilities.iter_mut().for_each(|p| *p /= inside);
    Ok(PortPopulations {
        probabilities,
        leakage,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    fn cfg(depth: f64) -> LatticeConfig {
        LatticeConfig::with_depth(depth).unwrap()
    }

    #[test]
    fn free_particle_diagonal() {
        let h = build_hamiltonian(&cfg(0.0), 0.0, 0.0).unwrap();
        let diag: Vec<f64> = (0..h.nrows()).map(|i| h[(i, i)].re).collect();
        assert_eq!(&diag[6..11], &[16.0, 4.0, 0.0, 4.0, 16.0]);
        for i in 0..h.nrows() {
            for j in 0..h.ncols() {
                if i != j {
                    assert_eq!(h[(i, j)], Complex64::new(0.0, 0.0));
                }
            }
        }
    }

    #[test]
    fn ten_recoil_coupling() {
        let h = build_hamiltonian(&cfg(10.0), 0.37, 0.0).unwrap();
        for i in 0..h.nrows() - 1 {
            assert_eq!(h[(i, i + 1)], Complex64::new(2.5, 0.0));
        }
    }

    #[test]
    fn rejects_non_finite() {
        assert!(build_hamiltonian(&cfg(1.0), f64::NAN, 0.0).is_err());
        assert!(build_hamiltonian(&cfg(1.0), 0.0, f64::INFINITY).is_err());
        assert!(LatticeConfig::with_depth(-1.0).is_err());
        assert!(LatticeConfig::new(1.0, 4, PhysicalConfig::default()).is_err());
    }

    #[test]
    fn degenerate_zone_edge() {
        let bands = solve_bands(&cfg(0.0), &[1.0]).unwrap();
        assert_abs_diff_eq!(bands.energies[0][0], 1.0, epsilon = 1e-12);
        assert_abs_diff_eq!(bands.energies[0][1], 1.0, epsilon = 1e-12);
    }

    #[test]
    fn ground_plane_wave_at_zero_depth() {
        let psi = bloch_state(&cfg(0.0), BlochIndex::ground()).unwrap();
        assert_abs_diff_eq!(psi.amplitude(0).re, 1.0, epsilon = 1e-14);
        assert_abs_diff_eq!(psi.norm_sqr() - psi.amplitude(0).norm_sqr(), 0.0, epsilon = 1e-14);
    }

    #[test]
    fn zone_edge_resolved_by_parity() {
        let (lower, d) = bloch_state_with_diagnostics(&cfg(0.0), BlochIndex::new(0, 1.0)).unwrap();
        assert!(d.parity_resolved);
        // Even combination of momenta +1 (j=0) and -1 (j=-1).
        assert_abs_diff_eq!(lower.amplitude(0).re, lower.amplitude(-1).re, epsilon = 1e-12);
        let upper = bloch_state(&cfg(0.0), BlochIndex::new(1, 1.0)).unwrap();
        assert_abs_diff_eq!(upper.amplitude(0).re, -upper.amplitude(-1).re, epsilon = 1e-12);
        assert_abs_diff_eq!(lower.inner(&upper).unwrap().norm(), 0.0, epsilon = 1e-12);
    }

    #[test]
    fn populations_of_plane_wave_and_superposition() {
        let psi = MomentumWavefunction::plane_wave(0.0, 8, 0).unwrap();
        let p = momentum_populations(&psi).unwrap();
        assert_eq!(p.probabilities, [0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0]);
        assert_eq!(p.leakage, 0.0);

        let mut amps = vec![Complex64::new(0.0, 0.0); 17];
        amps[8 - 2] = Complex64::new(1.0, 0.0);
        amps[8 + 2] = Complex64::new(1.0, 0.0);
        let psi = MomentumWavefunction::normalized(0.0, amps).unwrap();
        let p = momentum_populations(&psi).unwrap();
        assert_abs_diff_eq!(p.port(-2), 0.5, epsilon = 1e-15);
        assert_abs_diff_eq!(p.port(2), 0.5, epsilon = 1e-15);
    }

    #[test]
    fn leakage_is_flagged() {
        let mut amps = vec![Complex64::new(0.0, 0.0); 17];
        amps[8] = Complex64::new(0.9f64.sqrt(), 0.0);
        amps[8 + 5] = Complex64::new(0.1f64.sqrt(), 0.0);
        let psi = MomentumWavefunction::new(0.0, amps).unwrap();
        let p = momentum_populations(&psi).unwrap();
        assert!(p.leakage_flagged());
        assert_abs_diff_eq!(p.leakage, 0.1, epsilon = 1e-12);
        assert_abs_diff_eq!(p.port(0), 1.0, epsilon = 1e-12);
    }

    #[test]
    fn si_conversions() {
        let phys = PhysicalConfig::default();
        // 2ħk/m for Rb-87 at 1064 nm is 8.63 mm/s.
        assert_abs_diff_eq!(2.0 * phys.recoil_velocity(), 8.63e-3, epsilon = 1e-5);
        let tau = phys.bloch_period(1.0);
        assert_abs_diff_eq!(tau, 0.88e-3, epsilon = 0.005e-3);
        assert_abs_diff_eq!(phys.accel_from_bloch_period(tau), 1.0, epsilon = 1e-12);
        // Drift rate integrates to 2 ħk over one Bloch period.
        let t = phys.micros_to_natural(tau * 1e6);
        assert_abs_diff_eq!(phys.drift_rate(1.0) * t, 2.0, epsilon = 1e-12);
    }
}

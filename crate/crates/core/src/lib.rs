//! Digital twin of a Bloch-band atom interferometer in a shaken optical
//! lattice, with the calibration and inference stack used to read vector
//! accelerations out of its 49-port momentum grid.
//!
//! Modules, bottom-up:
//! - [`lattice`]: plane-wave Hamiltonian, bands and Bloch states.
//! - [`dynamics`]: exact piecewise-constant propagation and simulated sequences.
//! - [`control`]: waveform manipulation and gradient-based component design.
//! - [`imaging`]: detection noise, absorption images, ROI readout.
//! - [`estimation`]: empirical models, least squares, Bayesian updating, Fisher bounds.

pub mod control;
pub mod dynamics;
pub mod error;
pub mod estimation;
pub mod imaging;
pub mod lattice;
mod numeric;

pub use error::{Error, Result};

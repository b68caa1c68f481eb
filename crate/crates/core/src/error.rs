use thiserror::Error;

/// Errors produced by the simulation and estimation stack.
#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("non-finite value for {0}")]
    NonFinite(&'static str),

    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },

    /// Numerical convergence problems: truncation leakage, eigen-solver failures.
    #[error("convergence: {0}")]
    Convergence(String),

    /// Waveform `dt` values disagree between components.
    #[error("sample interval mismatch: {0} ns vs {1} ns")]
    DtMismatch(f64, f64),

    #[error("timing mismatch: {0}")]
    Timing(String),

    #[error("insufficient data: {0}")]
    InsufficientData(String),

    #[error("shot outside model support on channels {channels:?}")]
    OutsideSupport { channels: Vec<String> },

    #[error("estimation: {0}")]
    Estimation(String),

    #[error("discrimination failure: port spacing {spacing_um:.2} um < 3 x cloud sigma {sigma_um:.2} um")]
    Discrimination { spacing_um: f64, sigma_um: f64 },

    #[error("parse error: {0}")]
    Parse(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    /// True for errors that stem from numerical convergence rather than bad input.
    pub fn is_convergence(&self) -> bool {
        matches!(self, Error::Convergence(_))
    }

    /// True for errors raised by the estimation layer.
    pub fn is_estimation(&self) -> bool {
        matches!(
            self,
            Error::Estimation(_) | Error::OutsideSupport { .. } | Error::InsufficientData(_)
        )
    }
}

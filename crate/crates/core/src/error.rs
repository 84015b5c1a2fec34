//! Crate-wide error type.

/// Errors produced by construction, validation and the solvers.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("index {index} out of range (len {len})")]
    IndexOutOfRange { index: usize, len: usize },

    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("invalid coupling: {0}")]
    InvalidCoupling(String),

    #[error("cost row for template point {index} is empty; enlarge the truncation radius")]
    EnlargeRadius { index: usize },

    #[error("infeasible transport problem: unplaceable supply {deficit}")]
    Infeasible { deficit: f64 },

    #[error("insufficient data: {requested} modes requested but only {available} samples given")]
    InsufficientData { requested: usize, available: usize },

    #[error("invalid grid: {0}")]
    InvalidGrid(String),

    #[error("numerical failure: {0}")]
    NumericalFailure(String),

    #[error("invalid scale coefficient {0}: must be greater than -1")]
    InvalidScale(f64),

    #[error("configuration error: {0}")]
    Config(String),
}

impl Error {
    /// Stable machine-readable code for CLI error reports.
    pub fn code(&self) -> &'static str {
        match self {
            Error::IndexOutOfRange { .. } => "measure.index_out_of_range",
            Error::InvalidInput(_) => "measure.invalid_input",
            Error::InvalidCoupling(_) => "measure.invalid_coupling",
            Error::EnlargeRadius { .. } => "transport.enlarge_radius",
            Error::Infeasible { .. } => "transport.infeasible",
            Error::InsufficientData { .. } => "modes.insufficient_data",
            Error::InvalidGrid(_) => "modes.invalid_grid",
            Error::NumericalFailure(_) => "numerics.failure",
            Error::InvalidScale(_) => "energy.invalid_scale",
            Error::Config(_) => "config.invalid",
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;

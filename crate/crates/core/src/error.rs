use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("site {site} out of range for {n_sites} sites")]
    SiteOutOfRange { site: usize, n_sites: usize },

    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },

    #[error("{sites} sites exceeds the configured maximum of {max}")]
    DimensionOverflow { sites: usize, max: usize },

    #[error("invalid model: {0}")]
    InvalidModel(String),

    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("eigensolver failed: {0}")]
    Eigensolver(String),

    #[error("integrator step size underflow at t = {t}")]
    StepUnderflow { t: f64 },

    #[error("integrator exceeded {max_steps} steps before t = {t}")]
    TooManySteps { t: f64, max_steps: usize },

    #[error("state norm drifted by {drift:e} at t = {t}")]
    NormDrift { t: f64, drift: f64 },

    #[error("density lost positivity: min eigenvalue {min_eigenvalue:e} at t = {t}")]
    PositivityViolation { t: f64, min_eigenvalue: f64 },

    #[error("no oscillation detected")]
    NoOscillation,

    #[error("series too short: spans {span} but needs at least {needed}")]
    SeriesTooShort { span: f64, needed: f64 },

    #[error("period {period} too short for any real shift at b0z = {b0z}")]
    PeriodTooShort { period: f64, b0z: f64 },

    #[error("inversion table is not monotone in |B|")]
    NonMonotoneTable,

    #[error("measurement {value} outside table range [{lo}, {hi}]")]
    OutOfTableRange { value: f64, lo: f64, hi: f64 },

    #[error("config error: {0}")]
    Config(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    /// True for failures of the numerical engines as opposed to bad input.
    pub fn is_numerical(&self) -> bool {
        matches!(
            self,
            Error::Eigensolver(_)
                | Error::StepUnderflow { .. }
                | Error::TooManySteps { .. }
                | Error::NormDrift { .. }
                | Error::PositivityViolation { .. }
                | Error::NoOscillation
                | Error::SeriesTooShort { .. }
                | Error::PeriodTooShort { .. }
                | Error::NonMonotoneTable
                | Error::OutOfTableRange { .. }
        )
    }
}

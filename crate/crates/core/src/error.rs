use thiserror::Error;

/// Errors raised by the simulation, coupling and certification routines.
#[derive(Debug, Error, Clone, PartialEq)]
pub enum Error {
    #[error("integrator exceeded {max_steps} steps at t = {t}")]
    StepLimit { max_steps: usize, t: f64 },

    #[error("integrator step size underflow at t = {t}")]
    StepUnderflow { t: f64 },

    #[error("non-finite state at t = {t}")]
    NonFinite { t: f64 },

    #[error("state norm {norm:.3e} exceeded blow-up guard at t = {t}")]
    BlowUp { norm: f64, t: f64 },

    #[error("dimension mismatch: {0}")]
    Dimension(String),

    #[error("invalid parameter: {0}")]
    InvalidParameter(String),

    #[error("domain error: {0}")]
    Domain(String),

    #[error("rejection sampler exhausted its budget of {0} proposals")]
    RejectionBudget(usize),

    #[error("{0}")]
    Numeric(String),

    #[error("configuration error: {0}")]
    Config(String),

    #[error("i/o error: {0}")]
    Io(String),
}

impl Error {
    /// True for failures of the numerics (as opposed to bad input).
    pub fn is_numeric(&self) -> bool {
        matches!(
            self,
            Error::StepLimit { .. }
                | Error::StepUnderflow { .. }
                | Error::NonFinite { .. }
                | Error::BlowUp { .. }
                | Error::RejectionBudget(_)
                | Error::Numeric(_)
        )
    }
}

impl From<std::io::Error> for Error {
    fn from(e: std::io::Error) -> Self {
        Error::Io(e.to_string())
    }
}

impl From<csv::Error> for Error {
    fn from(e: csv::Error) -> Self {
        Error::Io(e.to_string())
    }
}

impl From<serde_json::Error> for Error {
    fn from(e: serde_json::Error) -> Self {
        Error::Config(e.to_string())
    }
}

pub type Result<T> = std::result::Result<T, Error>;

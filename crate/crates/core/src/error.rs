use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid geometry: {0}")]
    InvalidGeometry(String),

    #[error("polarization vector has norm {norm}, expected 1")]
    NonUnitPolarization { norm: f64 },

    #[error("coincident emitters at separation {0:e}")]
    SingularSeparation(f64),

    #[error("environment {env} is not compatible with geometry {geometry}")]
    Incompatible { env: String, geometry: String },

    #[error("every collective mode was truncated")]
    EmptyModeSet,

    #[error("momentum {0:?} is not part of the mode set")]
    UnknownMomentum(Vec<i64>),

    #[error("{n} emitters exceed the exact-solver cap of {cap}")]
    TooManyEmitters { n: usize, cap: usize },

    #[error("dimension mismatch: {0}")]
    Dimension(String),

    #[error("step size underflow at t = {t}: h = {h:e}, error norm = {err_norm:e}")]
    StepUnderflow { t: f64, h: f64, err_norm: f64 },

    #[error("step budget exhausted at t = {t} after {steps} steps")]
    TooManySteps { t: f64, steps: usize },

    #[error("non-finite state at t = {t}")]
    NonFinite { t: f64 },

    #[error("invalid time grid: {0}")]
    TimeGrid(String),

    #[error("config: {0}")]
    Config(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    /// Integration failures map to exit code 3, everything else is a
    /// problem with the request.
    pub fn is_solver_failure(&self) -> bool {
        matches!(
            self,
            Error::StepUnderflow { .. } | Error::TooManySteps { .. } | Error::NonFinite { .. }
        )
    }
}

pub type Result<T> = std::result::Result<T, Error>;

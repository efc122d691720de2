use thiserror::Error;

/// Errors produced by the model, solvers and experiment drivers.
#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid parameters: {0}")]
    InvalidParams(String),

    #[error("non-finite amplitude at shell {index}: {value}")]
    NonFinite { index: usize, value: f64 },

    #[error("state has {got} shells, expected {expected}")]
    ShapeMismatch { expected: usize, got: usize },

    #[error("shell index {index} out of range 0..={max}")]
    IndexOutOfRange { index: usize, max: usize },

    #[error("step size underflow at t = {t}: dt = {dt:e}")]
    StepUnderflow { t: f64, dt: f64 },

    #[error("step limit of {steps} reached at t = {t}")]
    StepLimit { t: f64, steps: u64 },

    #[error("positivity violated at t = {t}: a[{shell}] = {value:e} (max |a| = {scale:e})")]
    PositivityViolated {
        t: f64,
        shell: usize,
        value: f64,
        scale: f64,
    },

    #[error("no sign-changing shooting bracket: {0}")]
    NoBracket(String),

    #[error("fixed-point solve failed: {0}")]
    SolveFailed(String),

    #[error("singular linear system at row {0}")]
    Singular(usize),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    /// True when the failure is numerical rather than a bad input.
    pub fn is_numerical(&self) -> bool {
        matches!(
            self,
            Error::NonFinite { .. }
                | Error::StepUnderflow { .. }
                | Error::StepLimit { .. }
                | Error::PositivityViolated { .. }
                | Error::NoBracket(_)
                | Error::SolveFailed(_)
                | Error::Singular(_)
        )
    }
}

pub type Result<T> = std::result::Result<T, Error>;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch in {what}: expected {expected}, got {got}")]
    Dimension {
        what: &'static str,
        expected: usize,
        got: usize,
    },

    #[error("non-finite cost value for agent {agent}")]
    NonFiniteCost { agent: usize },

    #[error("non-finite value in {0}")]
    NonFinite(&'static str),

    #[error("invalid set: {0}")]
    InvalidSet(String),

    #[error("halfspace projection did not converge (max violation {residual:e})")]
    ProjectionFailed { residual: f64 },

    #[error("point lies outside the set (violation {violation:e})")]
    OutsideSet { violation: f64 },

    #[error("all sample pairs coincide")]
    DegenerateSamples,

    #[error("step size {which} = {gamma}: 1/gamma = {inv:.6} must exceed ||A|| = {norm_a:.6}")]
    StepSize {
        which: String,
        gamma: f64,
        inv: f64,
        norm_a: f64,
    },

    #[error("matrix identity Gamma^-1 - Ahat = Phi + Psi violated by {0:e}")]
    Identity(f64),

    #[error("covariance solve failed (condition estimate {cond:e})")]
    SingularCovariance { cond: f64 },

    #[error("missing message from agent {0}")]
    MissingMessage(usize),

    #[error("unphysical wake: turbine {turbine} sees wind speed {speed}")]
    UnphysicalWake { turbine: usize, speed: f64 },

    #[error("oracle: {0}")]
    Oracle(String),

    #[error("invalid argument: {0}")]
    Invalid(String),

    #[error("configuration invalid:\n  {}", .0.join("\n  "))]
    Config(Vec<String>),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

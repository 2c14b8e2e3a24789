use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid time grid: {0}")]
    InvalidGrid(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("invalid architecture: {0}")]
    InvalidArchitecture(String),

    #[error("dimension mismatch at {context}: expected {expected}, got {got}")]
    DimensionMismatch {
        context: String,
        expected: usize,
        got: usize,
    },

    #[error("non-finite value in {coefficient}{}", step_suffix(*.step))]
    NonFinite {
        coefficient: &'static str,
        step: Option<usize>,
    },

    #[error("non-finite gradient at {path}")]
    NonFiniteGradient { path: String },

    #[error("no trained network for time step {step}")]
    MissingNetwork { step: usize },

    #[error("training diverged at time step {step}, iteration {iteration} (loss {loss})")]
    Diverged {
        step: usize,
        iteration: usize,
        loss: f64,
    },

    #[error("time step {step} out of range for {scheme} solution ({detail})")]
    OutOfRange {
        scheme: &'static str,
        step: usize,
        detail: &'static str,
    },

    #[error("unknown {kind} '{name}'")]
    Unknown { kind: &'static str, name: String },

    #[error("malformed checkpoint: {0}")]
    Checkpoint(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

fn step_suffix(step: Option<usize>) -> String {
    match step {
        Some(i) => format!(" at Euler step {i}"),
        None => String::new(),
    }
}

impl Error {
    /// Attaches an Euler step index to a non-finite coefficient error.
    pub(crate) fn at_step(self, i: usize) -> Self {
        match self {
            Error::NonFinite {
                coefficient,
                step: None,
            } => Error::NonFinite {
                coefficient,
                step: Some(i),
            },
            other => other,
        }
    }
}

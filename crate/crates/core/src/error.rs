use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid configuration at `{field}`: {message}")]
    Config { field: String, message: String },

    #[error("insufficient data: {0}")]
    InsufficientData(String),

    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("{what} = {value} is outside [{lo}, {hi}]")]
    OutOfRange {
        what: String,
        value: f64,
        lo: f64,
        hi: f64,
    },

    #[error("degenerate range: {0}")]
    DegenerateRange(String),

    #[error("non-finite activation in layer {layer} of the {network} network")]
    NonFiniteLayer { network: String, layer: usize },

    #[error("numeric error: {0}")]
    Numeric(String),

    #[error("solver produced a non-finite state at t = {t}")]
    SolverFailure { t: f64 },

    #[error("{source_name}:{line}: {message}")]
    Csv {
        source_name: String,
        line: usize,
        message: String,
    },

    #[error("run with seed {seed} aborted at epoch {epoch}: {reason}")]
    AbortedRun {
        seed: u64,
        epoch: usize,
        reason: String,
    },

    #[error("ensemble failed: {0}")]
    Ensemble(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub fn config(field: impl Into<String>, message: impl Into<String>) -> Self {
        Error::Config {
            field: field.into(),
            message: message.into(),
        }
    }

    pub fn csv(source_name: impl Into<String>, line: usize, message: impl Into<String>) -> Self {
        Error::Csv {
            source_name: source_name.into(),
            line,
            message: message.into(),
        }
    }
}

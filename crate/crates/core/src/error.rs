use thiserror::Error;

/// Errors raised by the cost model, relaxations, solver and export paths.
#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid parameter `{name}`: {reason}")]
    InvalidParameter { name: &'static str, reason: String },

    #[error("retention ratio {value} at layer {layer} is outside [0, 1]")]
    RatioOutOfRange { layer: usize, value: f64 },

    #[error("length mismatch: expected {expected}, got {actual}")]
    LengthMismatch { expected: usize, actual: usize },

    #[error("layer index {index} out of range 1..={num_layers}")]
    LayerOutOfRange { index: usize, num_layers: usize },

    #[error("empty input: {0}")]
    Empty(&'static str),

    #[error("budget {budget} is below the minimum achievable cost {minimum}")]
    Infeasible { budget: f64, minimum: f64 },

    #[error("non-finite value encountered: {0}")]
    NonFinite(String),

    #[error("mismatched inputs: {0}")]
    Mismatch(String),

    #[error("I/O error: {0}")]
    Io(#[from] std::io::Error),

    #[error("JSON error: {0}")]
    Json(#[from] serde_json::Error),

    #[error("CSV error: {0}")]
    Csv(#[from] csv::Error),

    #[error("malformed file: {0}")]
    Format(String),
}

pub type Result<T> = std::result::Result<T, Error>;

pub(crate) fn invalid(name: &'static str, reason: impl Into<String>) -> Error {
    Error::InvalidParameter {
        name,
        reason: reason.into(),
    }
}

impl Error {
    /// Process exit code: 1 usage or input problems, 2 numerical failure,
    /// 3 infeasible budget.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Infeasible { .. } => 3,
            Error::NonFinite(_) => 2,
            _ => 1,
        }
    }
}

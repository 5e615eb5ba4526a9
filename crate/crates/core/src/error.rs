use thiserror::Error;

pub type Result<T> = std::result::Result<T, NpcError>;

#[derive(Debug, Error)]
pub enum NpcError {
    /// A caller broke a function precondition (empty input, shape mismatch, ...).
    #[error("contract violation: {0}")]
    Contract(String),

    /// Invalid configuration or parameter bounds.
    #[error("configuration error: {0}")]
    Config(String),

    #[error("parse error at line {line}: {message}")]
    Parse { line: usize, message: String },

    #[error("integrity error: {0}")]
    Integrity(String),

    #[error("noise injection error: {0}")]
    Injection(String),

    /// Input to the mixture fit carries no spread at all.
    #[error("degenerate input: {0}")]
    Degenerate(String),

    #[error("numeric failure at pair {pair_id}: {message}")]
    Numeric { pair_id: u64, message: String },

    #[error("I/O error: {0}")]
    Io(#[from] std::io::Error),

    #[error("JSON error: {0}")]
    Json(#[from] serde_json::Error),

    #[error("CSV error: {0}")]
    Csv(#[from] csv::Error),
}

impl NpcError {
    pub fn contract(msg: impl Into<String>) -> Self {
        NpcError::Contract(msg.into())
    }

    pub fn config(msg: impl Into<String>) -> Self {
        NpcError::Config(msg.into())
    }

    /// Process exit code: 2 usage/config, 3 data or contract, 4 numeric.
    pub fn exit_code(&self) -> i32 {
        match self {
            NpcError::Config(_) => 2,
            NpcError::Numeric { .. } => 4,
            _ => 3,
        }
    }
}

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid parameters: {0}")]
    InvalidParams(String),

    #[error("length mismatch: expected {expected} slots, got {got}")]
    LengthMismatch { expected: usize, got: usize },

    #[error("noise budget exhausted in {op}: {have} bits left, {need} required")]
    BudgetExhausted { op: &'static str, have: u32, need: u32 },

    #[error("decryption failure: ciphertext {id} has no noise budget left")]
    DecryptionFailure { id: u64 },

    #[error("dimension error: {0}")]
    Dimension(String),

    #[error("unknown method `{0}`; valid methods: Gazelle, IRON, BOLT, THOR, CryptoGen")]
    UnknownMethod(String),

    #[error("schema error: {0}")]
    Schema(String),

    #[error("empty input: {0}")]
    Empty(&'static str),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

use thiserror::Error;

/// Errors produced anywhere in the engine.
#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("{path}:{line}: {msg}")]
    Parse {
        path: String,
        line: usize,
        msg: String,
    },

    #[error("log_sum_exp over empty support")]
    EmptySupport,

    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),

    #[error("alignment error: {0}")]
    Alignment(String),

    #[error("invalid state: {0}")]
    State(String),

    #[error("invalid config: {0}")]
    Config(String),

    #[error("label error: {0}")]
    Label(String),

    #[error("non-finite gradient in parameter '{0}'")]
    NonFiniteGradient(String),

    #[error("instance too large: {0}")]
    TooLarge(String),

    #[error("checkpoint error: {0}")]
    Checkpoint(String),
}

pub type Result<T> = std::result::Result<T, Error>;

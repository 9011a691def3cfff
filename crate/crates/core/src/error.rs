use thiserror::Error;

#[derive(Debug, Error)]
pub enum MemrError {
    /// Caller violated an operation's contract (shape mismatch, empty input, ...).
    #[error("usage error: {0}")]
    Usage(String),

    #[error("numerical error: {0}")]
    Numerical(String),

    /// Input is well-formed but statistically degenerate (e.g. zero variance).
    #[error("degenerate input: {0}")]
    Degenerate(String),

    #[error("precondition failed: {0}")]
    Precondition(String),

    #[error("invalid config: {0}")]
    Config(String),

    #[error("checkpoint section `{section}`: {message}")]
    Checkpoint { section: String, message: String },

    #[error("training aborted at step {step}: {source}")]
    Step {
        step: u64,
        #[source]
        source: Box<MemrError>,
    },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

pub type Result<T> = std::result::Result<T, MemrError>;

pub(crate) fn usage<T>(msg: impl Into<String>) -> Result<T> {
    Err(MemrError::Usage(msg.into()))
}

pub(crate) fn check_dim(what: &str, expected: usize, got: usize) -> Result<()> {
    if expected != got {
        return usage(format!("{what}: expected length {expected}, got {got}"));
    }
    Ok(())
}

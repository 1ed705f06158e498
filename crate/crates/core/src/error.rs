use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    /// A caller violated a documented precondition (shape mismatch, bad sector, ...).
    #[error("contract violation: {0}")]
    Contract(String),

    #[error("solver failure: {0}")]
    SolverFailure(String),

    #[error("unstable matrix: {0}")]
    Unstable(String),

    #[error("usage: {0}")]
    Usage(String),

    #[error("unsupported model: {0}")]
    UnsupportedModel(String),

    #[error("initialization failed at stage `{stage}`: {details}")]
    Initialization { stage: String, details: String },

    #[error("projection failed: {0}")]
    Projection(String),

    #[error("I/O error: {0}")]
    Io(#[from] std::io::Error),

    #[error("JSON error: {0}")]
    Json(#[from] serde_json::Error),
}

pub(crate) fn contract(msg: impl Into<String>) -> Error {
    Error::Contract(msg.into())
}

pub(crate) fn ensure_shape(
    what: &str,
    got: (usize, usize),
    want: (usize, usize),
) -> Result<()> {
    if got != want {
        return Err(contract(format!(
            "{what}: expected {}x{}, got {}x{}",
            want.0, want.1, got.0, got.1
        )));
    }
    Ok(())
}

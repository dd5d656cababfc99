use thiserror::Error;

/// Errors produced anywhere in the library.
#[derive(Debug, Error)]
pub enum Error {
    #[error("domain error: {0}")]
    Domain(String),

    #[error("shape error: {0}")]
    Shape(String),

    #[error("degenerate importance weights: every log-weight is -inf")]
    DegenerateWeights,

    #[error("unsupported: {0}")]
    Capability(String),

    #[error("numerical divergence: {0}")]
    Divergence(String),

    #[error("format error: {0}")]
    Format(String),

    #[error("corrupt input: {0}")]
    Corruption(String),

    #[error("incompatible artifact: {0}")]
    Incompatible(String),

    #[error("config error: {0}")]
    Config(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

pub(crate) fn shape_err(what: impl Into<String>) -> Error {
    Error::Shape(what.into())
}

pub(crate) fn ensure_len(what: impl std::fmt::Display, got: usize, want: usize) -> Result<()> {
    if got == want {
        Ok(())
    } else {
        Err(shape_err(format!("{what}: expected length {want}, got {got}")))
    }
}

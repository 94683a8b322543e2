use thiserror::Error;

/// Errors produced by every module of this crate.
#[derive(Debug, Error)]
pub enum Error {
    /// Incompatible parameter layouts, tensor shapes or scaling conventions.
    #[error("layout error: {0}")]
    Layout(String),

    /// Invalid caller-provided input (empty data, out-of-range labels, bad `k`, ...).
    #[error("input error: {0}")]
    Input(String),

    /// A non-finite value entered a numerical routine.
    #[error("numeric error: {0}")]
    Numeric(String),

    /// The requested quantity does not exist for this state (e.g. the
    /// accumulator of an SGD optimizer).
    #[error("unavailable: {0}")]
    Unavailable(String),

    /// Exact enumeration was requested on an instance that is too large.
    #[error("capacity error: {0}")]
    Capacity(String),

    /// A persisted container or IDX file could not be decoded.
    #[error("format error in `{field}`: {message}")]
    Format { field: String, message: String },

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    pub(crate) fn format(field: impl Into<String>, message: impl Into<String>) -> Self {
        Error::Format {
            field: field.into(),
            message: message.into(),
        }
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

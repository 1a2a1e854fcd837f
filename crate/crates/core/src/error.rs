use std::io;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape error: {0}")]
    Shape(String),

    #[error("domain error: {0}")]
    Domain(String),

    /// Misuse of an API contract, e.g. calling backward on a non-scalar.
    #[error("contract violation: {0}")]
    Contract(String),

    #[error("class {class} has no pixels in the mask")]
    EmptyClassRegion { class: usize },

    #[error("invalid configuration: {0}")]
    Config(String),

    /// Malformed PGM or checkpoint data.
    #[error("{what}: {detail}")]
    Format { what: &'static str, detail: String },

    #[error("non-finite value: {0}")]
    NonFinite(String),

    #[error("metric undefined: {0}")]
    UndefinedMetric(String),

    #[error(transparent)]
    Io(#[from] io::Error),
}

impl Error {
    pub(crate) fn shape(msg: impl Into<String>) -> Self {
        Error::Shape(msg.into())
    }

    pub(crate) fn domain(msg: impl Into<String>) -> Self {
        Error::Domain(msg.into())
    }

    pub(crate) fn contract(msg: impl Into<String>) -> Self {
        Error::Contract(msg.into())
    }

    pub(crate) fn config(msg: impl Into<String>) -> Self {
        Error::Config(msg.into())
    }
}

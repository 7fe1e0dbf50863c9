//! Error type shared by the whole crate.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    /// Dimension disagreement; `axis` names the offending axis of the primary operand.
    #[error("{op}: shape error on axis {axis}: {detail}")]
    Shape {
        op: &'static str,
        axis: usize,
        detail: String,
    },
    /// Invalid or inconsistent configuration.
    #[error("config error: {0}")]
    Config(String),
    /// Malformed files, missing utterances, bad manifests.
    #[error("data error: {0}")]
    Data(String),
    /// NaN/Inf or other numeric breakdown.
    #[error("numeric failure: {0}")]
    Numeric(String),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

impl Error {
    pub fn shape(op: &'static str, axis: usize, detail: impl Into<String>) -> Self {
        Error::Shape {
            op,
            axis,
            detail: detail.into(),
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;

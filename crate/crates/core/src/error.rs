use std::io;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid format string {0:?}: expected M<a>E<b> with a + b = 7")]
    InvalidFormat(String),

    #[error("cannot encode non-finite value {0}")]
    NonFinite(f64),

    #[error("empty tensor")]
    EmptyTensor,

    #[error("layer {layer:?} has zero {what}; cannot normalize")]
    DegenerateLayer { layer: String, what: &'static str },

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("truncation width t={t} outside supported range {min}..={max}")]
    TruncationWidth { t: u32, min: u32, max: u32 },

    #[error("invalid network: {0}")]
    Graph(String),

    #[error("parse error in {section} section at byte {offset}: {msg}")]
    Parse {
        section: &'static str,
        offset: usize,
        msg: String,
    },

    #[error("unsupported: {0}")]
    Unsupported(String),

    #[error(transparent)]
    Io(#[from] io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

impl Error {
    pub(crate) fn parse(section: &'static str, offset: usize, msg: impl Into<String>) -> Self {
        Error::Parse {
            section,
            offset,
            msg: msg.into(),
        }
    }

    /// Numerical degeneracy as opposed to bad input or I/O.
    pub fn is_numerical(&self) -> bool {
        matches!(self, Error::DegenerateLayer { .. } | Error::NonFinite(_))
    }
}

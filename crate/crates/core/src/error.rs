use thiserror::Error;

use crate::weights::ArchiveError;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    /// Inconsistent shapes, channel counts or missing configuration fields.
    #[error("configuration error: {0}")]
    Config(String),

    /// The caller passed something the operation does not accept (e.g. wrong input shape).
    #[error("usage error: {0}")]
    Usage(String),

    #[error("parse error in record {record}: {message}")]
    Parse { record: String, message: String },

    #[error(transparent)]
    Archive(#[from] ArchiveError),

    #[error("image error: {0}")]
    Image(#[from] image::ImageError),

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

impl Error {
    pub(crate) fn config(msg: impl Into<String>) -> Self {
        Error::Config(msg.into())
    }

    pub(crate) fn usage(msg: impl Into<String>) -> Self {
        Error::Usage(msg.into())
    }
}

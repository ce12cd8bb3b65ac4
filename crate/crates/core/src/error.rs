use thiserror::Error;

use crate::color::ColorSpace;

#[derive(Debug, Error)]
pub enum Error {
    #[error("color space mismatch: expected {expected}, found {found}")]
    SpaceMismatch { expected: &'static str, found: ColorSpace },

    #[error("domain error: {0}")]
    Domain(String),

    #[error("out of range: {0}")]
    Range(String),

    #[error("dimension mismatch: {0}")]
    Dimensions(String),

    #[error("invalid parameter: {0}")]
    Parameter(String),

    #[error("numerical failure: {0}")]
    Numerical(String),

    #[error("data error: {0}")]
    Data(String),

    #[error("i/o error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error("png decode: {0}")]
    PngDecode(#[from] png::DecodingError),

    #[error("png encode: {0}")]
    PngEncode(#[from] png::EncodingError),
}

/// Coarse classification used by front-ends to pick exit codes.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ErrorClass {
    Config,
    Data,
    Numerical,
}

impl Error {
    pub fn io(path: impl AsRef<std::path::Path>, source: std::io::Error) -> Self {
        Error::Io { path: path.as_ref().display().to_string(), source }
    }

    pub fn class(&self) -> ErrorClass {
        match self {
            Error::SpaceMismatch { .. } | Error::Domain(_) | Error::Range(_) | Error::Parameter(_) => {
                ErrorClass::Config
            }
            Error::Numerical(_) => ErrorClass::Numerical,
            Error::Dimensions(_)
            | Error::Data(_)
            | Error::Io { .. }
            | Error::Json(_)
            | Error::PngDecode(_)
            | Error::PngEncode(_) => ErrorClass::Data,
        }
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

use std::path::PathBuf;

/// Crate-wide error type.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("{path}: bad magic, not an MCT1 tensor file")]
    BadMagic { path: PathBuf },

    #[error("{path}: unsupported dtype tag {tag}")]
    UnsupportedDtype { path: PathBuf, tag: u8 },

    #[error("{path}: file holds {found} but {requested} was requested")]
    DtypeMismatch {
        path: PathBuf,
        found: &'static str,
        requested: &'static str,
    },

    #[error("{path}: header claims {expected} bytes of payload, file has {actual}")]
    Truncated {
        path: PathBuf,
        expected: u64,
        actual: u64,
    },

    #[error("{path}: tensor dimensions overflow the addressable size")]
    DimOverflow { path: PathBuf },

    #[error("invalid tensor shape {shape:?}: {reason}")]
    InvalidShape { shape: Vec<usize>, reason: String },

    #[error("{path}: malformed segment table: {detail}")]
    BadSegmentTable { path: PathBuf, detail: String },

    #[error("{0}")]
    Validation(String),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn validation(msg: impl Into<String>) -> Self {
        Error::Validation(msg.into())
    }
}

pub type Result<T> = std::result::Result<T, Error>;

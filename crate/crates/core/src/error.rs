use std::path::PathBuf;

use crate::embed::SourceTag;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("{op}: dimension mismatch between {left:?} and {right:?}")]
    Dimension {
        op: &'static str,
        left: (usize, usize),
        right: (usize, usize),
    },

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("format error at byte {offset}: {message}")]
    Format { offset: u64, message: String },

    #[error("unsupported format version {found} (expected {expected})")]
    Version { found: u32, expected: u32 },

    #[error("checksum mismatch: stored {stored:#010x}, computed {computed:#010x}")]
    Checksum { stored: u32, computed: u32 },

    #[error("unknown source {0}")]
    UnknownSource(SourceTag),

    #[error("non-finite values in {0}")]
    NonFinite(String),

    #[error("collision group of {group_size} users exceeds special-token capacity {capacity}")]
    Capacity { group_size: usize, capacity: usize },

    #[error("token id {id} out of range: {reason}")]
    TokenOutOfRange { id: u64, reason: String },

    #[error("missing template placeholder `{0}`")]
    MissingPlaceholder(&'static str),

    #[error("both classes must be present")]
    SingleClass,

    #[error("zero-norm vector at row {0}: cosine similarity undefined")]
    ZeroNorm(usize),

    #[error("embedding provider: {0}")]
    Provider(String),

    #[error("{path}: {source}")]
    File {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidArgument(msg.into())
    }

    pub(crate) fn format(offset: u64, msg: impl Into<String>) -> Self {
        Error::Format {
            offset,
            message: msg.into(),
        }
    }

    pub(crate) fn file(path: impl Into<PathBuf>) -> impl FnOnce(std::io::Error) -> Error {
        let path = path.into();
        move |source| Error::File { path, source }
    }

    /// Data and file-format problems, as opposed to bad arguments or numerical failure.
    pub fn is_data_error(&self) -> bool {
        matches!(
            self,
            Error::Format { .. }
                | Error::Version { .. }
                | Error::Checksum { .. }
                | Error::File { .. }
                | Error::Io(_)
                | Error::Json(_)
                | Error::TokenOutOfRange { .. }
                | Error::UnknownSource(_)
                | Error::MissingPlaceholder(_)
                | Error::Provider(_)
                | Error::Capacity { .. }
                | Error::SingleClass
        )
    }

    pub fn is_numerical(&self) -> bool {
        matches!(self, Error::NonFinite(_) | Error::ZeroNorm(_))
    }
}

use std::path::PathBuf;

use thiserror::Error;

/// Errors produced anywhere in the pipeline.
#[derive(Debug, Error)]
pub enum Error {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("header is missing required key `{key}`")]
    MissingHeaderKey { key: &'static str },

    #[error("malformed header key `{key}`: {reason}")]
    MalformedHeader { key: String, reason: String },

    #[error("unsupported value for header key `{key}`: {value}")]
    UnsupportedHeaderValue { key: &'static str, value: String },

    #[error("csv {path}: {reason}")]
    Csv { path: PathBuf, reason: String },

    #[error("invalid volume: {0}")]
    InvalidVolume(String),

    #[error("candidate series `{candidate}` does not match volume series `{volume}`")]
    SeriesMismatch { candidate: String, volume: String },

    #[error("degenerate candidate at voxel {center:?}: more than half of the largest crop lies outside a grid of {dims:?}")]
    DegenerateCandidate { center: [i64; 3], dims: [usize; 3] },

    #[error("augmentation applies to nodule candidates only")]
    NotANodule,

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("invalid model config: {0}")]
    InvalidConfig(String),

    #[error("shape mismatch at `{layer}`: {detail}")]
    ShapeMismatch { layer: String, detail: String },

    #[error("unknown feature-map tag `{0}`")]
    UnknownTag(String),

    #[error("non-finite loss {loss} at epoch {epoch}, batch {batch}")]
    NonFiniteLoss { epoch: usize, batch: usize, loss: f64 },

    #[error("missing patch record for candidate {0}")]
    MissingPatch(String),

    #[error("container format: {0}")]
    Format(String),

    #[error("evaluation: {0}")]
    Evaluation(String),

    #[error("synthetic generation: {0}")]
    Synthetic(String),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}

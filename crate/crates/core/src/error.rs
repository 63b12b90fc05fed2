use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid bounding box: {0}")]
    InvalidBox(String),
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("dimension error: {0}")]
    Dimension(String),
    #[error("input too small: {0}")]
    Size(String),
    #[error("configuration error: {0}")]
    Config(String),
    #[error("tracker state error: {0}")]
    State(String),
    #[error("invalid argument: {0}")]
    Argument(String),
    #[error(transparent)]
    WeightStore(#[from] WeightStoreError),
    #[error(transparent)]
    Ingest(#[from] IngestError),
    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}

/// Failures reading or writing the weight container.
#[derive(Debug, Error)]
pub enum WeightStoreError {
    #[error("malformed manifest: {0}")]
    MalformedManifest(String),
    #[error("tensor `{name}` has shape {found:?}, expected {expected:?}")]
    ShapeMismatch {
        name: String,
        expected: Vec<usize>,
        found: Vec<usize>,
    },
    #[error("blob truncated: tensor `{name}` needs bytes {start}..{end}, blob has {len}")]
    TruncatedBlob {
        name: String,
        start: usize,
        end: usize,
        len: usize,
    },
    #[error("missing tensor `{0}`")]
    MissingTensor(String),
    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

/// Failures ingesting a benchmark sequence directory.
#[derive(Debug, Error)]
pub enum IngestError {
    #[error("missing {0}")]
    Missing(PathBuf),
    #[error("{frames} frames but {boxes} groundtruth boxes")]
    CountMismatch { frames: usize, boxes: usize },
    #[error("{path}:{line}: cannot parse `{text}`")]
    UnparsableLine {
        path: PathBuf,
        line: usize,
        text: String,
    },
    #[error("{path}:{line}: degenerate box")]
    InvalidBox { path: PathBuf, line: usize },
    #[error("cannot decode image {path}: {message}")]
    Image { path: PathBuf, message: String },
    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

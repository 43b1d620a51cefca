use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, SrnrError>;

#[derive(Debug, Error)]
pub enum SrnrError {
    #[error("invalid specification: {0}")]
    InvalidSpec(String),

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("empty mask: at least one voxel must be selected")]
    EmptyMask,

    #[error("degenerate intensity range: p1 == p99 == {0}")]
    DegenerateIntensity(f64),

    #[error("non-finite value in {0}")]
    NonFinite(String),

    #[error("unsupported file format: {0}")]
    UnsupportedFormat(String),

    #[error("unsupported NIfTI datatype code {0} (only float32 and int16 are read)")]
    UnsupportedDatatype(i16),

    #[error("unsupported NIfTI shape: {0}")]
    UnsupportedShape(String),

    #[error("I/O error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("training diverged: {0}")]
    TrainingDivergence(String),

    #[error("no valid patch can be sampled: {0}")]
    EmptyStream(String),

    #[error("degenerate design matrix: {0}")]
    DegenerateDesign(String),

    #[error("invalid tape: {0}")]
    InvalidTape(String),

    #[error("configuration error: {0}")]
    Config(String),

    #[error("malformed checkpoint: {0}")]
    Checkpoint(String),
}

impl SrnrError {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        SrnrError::Io {
            path: path.into(),
            source,
        }
    }

    /// True for errors that originate in the filesystem rather than in the
    /// data or the computation.
    pub fn is_io(&self) -> bool {
        matches!(self, SrnrError::Io { .. })
    }
}

use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),

    #[error("i/o error on {path}: {source}")]
    IoAt {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),

    #[error("not a NIfTI-1 file")]
    NotNifti,

    #[error("unsupported NIfTI datatype code {0}")]
    UnsupportedDatatype(i16),

    #[error("unsupported dimension count {0} (expected 3 or 4)")]
    DimCount(i16),

    #[error("payload length mismatch: header declares {expected} bytes, file holds {actual}")]
    Truncated { expected: u64, actual: u64 },

    #[error("non-finite value in {0}")]
    NonFinite(&'static str),

    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),

    #[error("invalid input: {0}")]
    Invalid(String),

    #[error("zero variance channel {channel}")]
    ZeroVariance { channel: usize },

    #[error("need at least 2 training studies")]
    TooFewStudies,

    #[error("all training vectors are numerically zero")]
    AllZeroTraining,

    #[error("no positive labels")]
    NoPositives,

    #[error("labels contain a single class")]
    SingleClass,

    #[error("all paired differences are zero")]
    AllZeroDifferences,

    #[error("need at least 5 non-zero paired differences, got {0}")]
    TooFewPairs(usize),

    #[error("pathological study {0} has an empty lesion mask")]
    EmptyLesionMask(usize),

    #[error("infeasible lesion packing: {0}")]
    InfeasiblePacking(String),

    #[error("bad model file: {0}")]
    BadModel(String),

    #[error("missing external scores: {}", .0.display())]
    MissingExternalScores(PathBuf),
}

impl Error {
    pub(crate) fn io_at(path: impl Into<PathBuf>) -> impl FnOnce(std::io::Error) -> Error {
        let path = path.into();
        move |source| Error::IoAt { path, source }
    }
}

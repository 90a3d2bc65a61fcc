use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("duplicate symbol {0:?} in vocabulary")]
    DuplicateSymbol(String),

    #[error("vocabulary needs at least 2 content symbols, got {0}")]
    VocabularyTooSmall(usize),

    #[error("symbol {symbol:?} is reserved and cannot be a content token")]
    ReservedSymbol { symbol: String },

    #[error("unknown symbol {symbol:?} at position {position}")]
    UnknownSymbol { symbol: String, position: usize },

    #[error("token id {0} is not a content token")]
    NotContent(usize),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("invalid synthesis spec: {0}")]
    Spec(String),

    #[error("invalid mixing request: {0}")]
    Mix(String),

    #[error("label of length {label_len} (with {repeats} adjacent repeats) does not fit in {frames} frames")]
    InfeasibleLabel {
        label_len: usize,
        repeats: usize,
        frames: usize,
    },

    #[error("brute-force CTC limits exceeded: {0}")]
    BruteForceLimit(String),

    #[error("invalid permutation {0:?}")]
    InvalidPermutation(Vec<usize>),

    #[error("{got} speakers exceeds the permutation search limit of {max}")]
    TooManySpeakers { got: usize, max: usize },

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("every component is infeasible for CTC scoring")]
    AllInfeasible,

    #[error("input of {frames} frames is shorter than the subsampling factor {factor}")]
    InputTooShort { frames: usize, factor: usize },

    #[error("pad token in a non-suffix position {0} of the decoder target")]
    PadInTarget(usize),

    #[error("reference token count is zero")]
    EmptyReference,

    #[error("non-finite loss {value} at sample {sample}")]
    NonFinite { sample: String, value: f64 },

    #[error("{path}: {message}")]
    Format { path: PathBuf, message: String },

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("{path}: {source}")]
    Wav {
        path: PathBuf,
        #[source]
        source: hound::Error,
    },

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn format(path: impl Into<PathBuf>, message: impl Into<String>) -> Self {
        Error::Format {
            path: path.into(),
            message: message.into(),
        }
    }
}

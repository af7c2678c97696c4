use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("{op}: dimension mismatch between {left:?} and {right:?}")]
    Shape {
        op: &'static str,
        left: Vec<usize>,
        right: Vec<usize>,
    },

    #[error("contract violated: {0}")]
    Contract(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("invalid partition: {0}")]
    Partition(#[from] PartitionError),

    #[error("invalid dataset: {0}")]
    Data(#[from] DataError),

    #[error("invalid checkpoint: {0}")]
    Checkpoint(#[from] CheckpointError),

    #[error("non-finite loss term `{term}` at epoch {epoch}, batch {batch}")]
    NonFinite {
        term: &'static str,
        epoch: usize,
        batch: usize,
    },

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("{path}: malformed JSON: {source}")]
    Json {
        path: PathBuf,
        #[source]
        source: serde_json::Error,
    },
}

impl Error {
    pub(crate) fn shape(op: &'static str, left: &[usize], right: &[usize]) -> Self {
        Error::Shape {
            op,
            left: left.to_vec(),
            right: right.to_vec(),
        }
    }

    pub(crate) fn contract(msg: impl Into<String>) -> Self {
        Error::Contract(msg.into())
    }

    pub(crate) fn config(msg: impl Into<String>) -> Self {
        Error::Config(msg.into())
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn json(path: impl Into<PathBuf>, source: serde_json::Error) -> Self {
        Error::Json {
            path: path.into(),
            source,
        }
    }

    /// True for errors caused by bad user-supplied settings rather than bad data.
    pub fn is_config(&self) -> bool {
        matches!(self, Error::Config(_))
    }
}

#[derive(Debug, Error, PartialEq, Eq)]
pub enum PartitionError {
    #[error("no clusters")]
    Empty,
    #[error("cluster {cluster} is empty")]
    EmptyCluster { cluster: usize },
    #[error("attribute index {index} out of range for {d} attributes")]
    OutOfRange { index: usize, d: usize },
    #[error("attribute index {index} appears in more than one cluster")]
    Overlap { index: usize },
    #[error("attribute index {index} is not covered by any cluster")]
    Gap { index: usize },
}

#[derive(Debug, Error, PartialEq, Eq)]
pub enum DataError {
    #[error("missing file {0}")]
    MissingFile(String),
    #[error("{file}: expected {expected} bytes, found {actual}")]
    SizeMismatch {
        file: String,
        expected: u64,
        actual: u64,
    },
    #[error("label {label} of sample {sample} is out of range for {k} classes")]
    LabelOutOfRange { sample: usize, label: u32, k: usize },
    #[error("train sample {sample} has label {label}, which is not a seen class")]
    SplitViolation { sample: usize, label: u32 },
    #[error("class split is invalid: {0}")]
    ClassSplit(String),
    #[error("sample index {index} out of range for {n} samples")]
    SampleOutOfRange { index: usize, n: usize },
    #[error("sample {0} appears in both train and test splits")]
    TrainTestOverlap(usize),
    #[error("no unseen classes")]
    EmptyUnseen,
    #[error("test split must contain samples of both seen and unseen classes")]
    IncompleteTestSplit,
    #[error("inconsistent dimensions: {0}")]
    Dims(String),
}

#[derive(Debug, Error, PartialEq, Eq)]
pub enum CheckpointError {
    #[error("bad magic bytes {0:?}")]
    BadMagic([u8; 4]),
    #[error("unsupported format version {0}")]
    BadVersion(u32),
    #[error("header: {0}")]
    Header(String),
    #[error("blob section holds {actual} bytes but the header declares {expected}")]
    Size { expected: u64, actual: u64 },
    #[error("file truncated")]
    Truncated,
}

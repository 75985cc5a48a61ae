use std::path::PathBuf;

use crate::{ClassId, SampleId};

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("invalid manifest {path}: {message}")]
    Manifest { path: PathBuf, message: String },
    #[error("dimension mismatch in {what}: expected {expected} bytes, found {actual}")]
    DimensionMismatch {
        what: String,
        expected: u64,
        actual: u64,
    },
    #[error("non-finite feature value at row {row}, column {col}")]
    NonFinite { row: usize, col: usize },
    #[error("splits {first:?} and {second:?} overlap at sample {sample}")]
    OverlappingSplits {
        first: String,
        second: String,
        sample: SampleId,
    },
    #[error("split {split:?}: {message}")]
    Split { split: String, message: String },
    #[error("label {label} at sample {sample} is not a known class (have {num_classes})")]
    LabelOutOfRange {
        sample: usize,
        label: u32,
        num_classes: usize,
    },
    #[error("split {0:?} is empty")]
    EmptySplit(String),
    #[error("training pool needs at least one positive and one negative label")]
    SingleClassPool,
    #[error("sample id {0} is out of range or not part of the pool")]
    InvalidSample(SampleId),
    #[error("dimension mismatch: model has {model} weights, features have {features} columns")]
    ModelDimension { model: usize, features: usize },
    #[error("criterion input {value} at position {index} is outside [0, 1]")]
    ProbabilityRange { index: usize, value: f64 },
    #[error("no unlabeled samples left to score")]
    EmptyPool,
    #[error("class {class} has {available} eligible samples, {required} required")]
    ClassTooSmall {
        class: ClassId,
        available: usize,
        required: usize,
    },
    #[error("class {0} has no pool members")]
    EmptyClass(ClassId),
    #[error("sample {sample} does not belong to clustered class {class}")]
    ForeignSample { sample: SampleId, class: ClassId },
    #[error("annotator returned {got} labels for a batch of {expected}")]
    AnnotationCount { expected: usize, got: usize },
    #[error("unknown strategy {0:?}")]
    UnknownStrategy(String),
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("session state: {0}")]
    State(String),
    #[error(transparent)]
    Csv(#[from] csv::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}

use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

/// Every failure the pipeline can report.
///
/// Variants are grouped by the stage that raises them. The service maps
/// them onto HTTP status codes and the CLI onto exit codes, so new
/// variants must be classified in both places.
#[derive(Debug, Error)]
pub enum Error {
    // ingest
    #[error("malformed record at line {line}: {message}")]
    MalformedRecord { line: usize, message: String },
    #[error("schema violation at line {line}, field `{field}`: {message}")]
    SchemaViolation {
        line: usize,
        field: String,
        message: String,
    },
    #[error("duplicate event id `{event_id}` at line {line}")]
    DuplicateEventId { event_id: String, line: usize },
    #[error("class `{class}` has {available} labeled events, {requested} requested")]
    InsufficientClassCount {
        class: String,
        available: usize,
        requested: usize,
    },

    // preprocess
    #[error("event `{event_id}` has {frames} frames, at least 2 are required")]
    EventTooShort { event_id: String, frames: usize },
    #[error("event `{0}` has a constant spectral matrix")]
    DegenerateEvent(String),
    #[error("all training events share the same duration")]
    DegenerateDurations,

    // nn
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("batch normalization in train mode needs at least 2 samples, got {0}")]
    BatchTooSmall(usize),
    #[error("backward called without a matching cached forward pass: {0}")]
    StateMismatch(String),
    #[error("corrupt checkpoint: {0}")]
    CorruptCheckpoint(String),
    #[error("unsupported checkpoint format version {0}")]
    VersionUnsupported(u32),
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    // training
    #[error("dataset is empty")]
    EmptyDataset,
    #[error("training set contains a single class")]
    SingleClassTrainingSet,
    #[error("dataset has {size} events, need at least {required}")]
    DatasetTooSmall { size: usize, required: usize },
    #[error("event `{0}` carries no label")]
    UnlabeledEvent(String),

    // active learning
    #[error("invalid probability distribution: {0}")]
    InvalidDistribution(String),
    #[error("unknown event `{0}`")]
    UnknownEvent(String),
    #[error("event `{0}` is already labeled")]
    AlreadyLabeled(String),
    #[error("{available} new labels since last retrain, {required} required")]
    NotEnoughNewLabels { available: usize, required: usize },
    #[error("labeling queue is full ({0} entries)")]
    QueueFull(usize),

    #[error("{path}: {source}")]
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

    /// Stable machine-readable code, used in service error bodies.
    pub fn code(&self) -> &'static str {
        match self {
            Error::MalformedRecord { .. } => "MalformedRecord",
            Error::SchemaViolation { .. } => "SchemaViolation",
            Error::DuplicateEventId { .. } => "DuplicateEventId",
            Error::InsufficientClassCount { .. } => "InsufficientClassCount",
            Error::EventTooShort { .. } => "EventTooShort",
            Error::DegenerateEvent(_) => "DegenerateEvent",
            Error::DegenerateDurations => "DegenerateDurations",
            Error::ShapeMismatch(_) => "ShapeMismatch",
            Error::BatchTooSmall(_) => "BatchTooSmall",
            Error::StateMismatch(_) => "StateMismatch",
            Error::CorruptCheckpoint(_) => "CorruptCheckpoint",
            Error::VersionUnsupported(_) => "VersionUnsupported",
            Error::InvalidConfig(_) => "InvalidConfig",
            Error::EmptyDataset => "EmptyDataset",
            Error::SingleClassTrainingSet => "SingleClassTrainingSet",
            Error::DatasetTooSmall { .. } => "DatasetTooSmall",
            Error::UnlabeledEvent(_) => "UnlabeledEvent",
            Error::InvalidDistribution(_) => "InvalidDistribution",
            Error::UnknownEvent(_) => "UnknownEvent",
            Error::AlreadyLabeled(_) => "AlreadyLabeled",
            Error::NotEnoughNewLabels { .. } => "NotEnoughNewLabels",
            Error::QueueFull(_) => "QueueFull",
            Error::Io { .. } => "Io",
        }
    }

    /// True for errors caused by the caller's input rather than the runtime.
    pub fn is_data_error(&self) -> bool {
        !matches!(self, Error::Io { .. } | Error::StateMismatch(_))
    }
}

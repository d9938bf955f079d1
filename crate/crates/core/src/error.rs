use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch in {op}: {lhs:?} vs {rhs:?}")]
    Dimension {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },

    #[error("invalid shape {0:?}: dimensions must be positive and match the data length")]
    Shape(Vec<usize>),

    #[error("axis {axis} out of range for rank {rank}")]
    Axis { axis: usize, rank: usize },

    #[error("loss node must be a scalar, got shape {0:?}")]
    NonScalarLoss(Vec<usize>),

    #[error("empty batch: no labeled positions")]
    EmptyBatch,

    #[error("label ({position}, {token}) out of range for logits {rows}x{vocab}")]
    LabelRange {
        position: usize,
        token: usize,
        rows: usize,
        vocab: usize,
    },

    #[error("vocabulary is empty")]
    EmptyVocab,

    #[error("duplicate token {token:?} at line {line}")]
    DuplicateToken { token: String, line: usize },

    #[error("vocabulary is missing special token {0}")]
    MissingSpecial(&'static str),

    #[error("token id {id} out of range for vocabulary of size {size}")]
    IdRange { id: u32, size: usize },

    #[error("malformed mapping row {line}: {reason}")]
    MalformedMapping { line: usize, reason: String },

    #[error("document has an empty body after removing the title")]
    EmptyBody,

    #[error("poem must have exactly 4 lines, got {0}")]
    PoemLines(usize),

    #[error("line {0:?} contains the line separator")]
    SeparatorInLine(String),

    #[error("split needs {needed} examples but the dataset has {available}")]
    SplitTooLarge { needed: usize, available: usize },

    #[error("invalid split: {0}")]
    InvalidSplit(String),

    #[error("invalid model config: {0}")]
    Config(String),

    #[error("sequence length {len} exceeds max_positions {max}")]
    SequenceTooLong { len: usize, max: usize },

    #[error("checkpoint has no decoder")]
    NoDecoder,

    #[error("checkpoint has no classification head")]
    NoClassifier,

    #[error("missing parameter {0}")]
    MissingParam(String),

    #[error("parameter {name} has shape {found:?}, expected {expected:?}")]
    ParamShape {
        name: String,
        expected: Vec<usize>,
        found: Vec<usize>,
    },

    #[error("corrupt checkpoint: {0}")]
    CorruptCheckpoint(String),

    #[error("unsupported checkpoint version {0}")]
    CheckpointVersion(u32),

    #[error("incompatible initial checkpoint: {0}")]
    IncompatibleInit(String),

    #[error("empty corpus")]
    EmptyCorpus,

    #[error("empty dataset split: {0}")]
    EmptySplit(&'static str),

    #[error("label {label} out of range for {classes} classes")]
    ClassLabel { label: usize, classes: usize },

    #[error("step must be >= 1")]
    ZeroStep,

    #[error("unknown task {0:?}")]
    UnknownTask(String),

    #[error("invalid decode config: {0}")]
    DecodeConfig(String),

    #[error("count mismatch ({what}): {left} vs {right}")]
    CountMismatch {
        what: &'static str,
        left: usize,
        right: usize,
    },

    #[error("empty input")]
    EmptyInput,

    #[error("system coverage mismatch: {0}")]
    Coverage(String),

    #[error("invalid score {value:?} in row {row}")]
    InvalidScore { row: String, value: String },

    #[error("row {0} is not scored")]
    Unscored(String),

    #[error("row {0} has no entry in the key")]
    UnknownRow(String),

    #[error("parse error in {what}: {msg}")]
    Parse { what: String, msg: String },

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

    pub(crate) fn parse(what: impl Into<String>, msg: impl ToString) -> Self {
        Error::Parse {
            what: what.into(),
            msg: msg.to_string(),
        }
    }
}

use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch in {op}: {detail}")]
    Shape { op: &'static str, detail: String },

    #[error("invalid graph: {0}")]
    Graph(String),

    #[error("edge ({src}, {dst}) in relation `{relation}` references a node outside 0..{node_count}")]
    EdgeOutOfRange {
        relation: String,
        src: usize,
        dst: usize,
        node_count: usize,
    },

    #[error("split failed: {0}")]
    Split(String),

    #[error("cannot read {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("{path}:{line}: {msg}")]
    Parse { path: PathBuf, line: usize, msg: String },

    #[error("duplicate node id {0}")]
    DuplicateNode(usize),

    #[error("invalid manifest: {0}")]
    Manifest(String),

    #[error("invalid synthetic spec: {0}")]
    SynthSpec(String),

    #[error("token `{0}` is not in the vocabulary")]
    OutOfVocabulary(String),

    #[error("token index {index} out of range for vocabulary of size {size}")]
    TokenIndex { index: usize, size: usize },

    #[error("sequence of length {len} exceeds the context length {max}")]
    SequenceTooLong { len: usize, max: usize },

    #[error("invalid template: {0}")]
    Template(String),

    #[error("injection failed: {0}")]
    Injection(String),

    #[error("self-loops were already added to the view of relation {0}")]
    SelfLoopsPresent(usize),

    #[error("node {0} is unlabeled")]
    Unlabeled(usize),

    #[error("unlabeled nodes have no target sequence")]
    NoTarget,

    #[error("AUC is undefined when only one class is present (recall {recall:?}, g-mean {g_mean:?})")]
    AucUndefined { recall: Option<f64>, g_mean: Option<f64> },

    #[error("empty input: {0}")]
    Empty(&'static str),

    #[error("invalid config: {0}")]
    Config(String),

    #[error("checkpoint: {0}")]
    Checkpoint(String),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub(crate) fn shape(op: &'static str, detail: impl Into<String>) -> Self {
        Error::Shape {
            op,
            detail: detail.into(),
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}

use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("{op}: shape mismatch between {lhs:?} and {rhs:?}")]
    ShapeMismatch {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },

    #[error("{op}: invalid argument: {msg}")]
    InvalidArgument { op: &'static str, msg: String },

    #[error("{op}: output would be empty for input {input:?}")]
    EmptyOutput { op: &'static str, input: Vec<usize> },

    #[error("input {height}x{width} too small: layer `{layer}` would produce an empty output")]
    InputTooSmall {
        layer: String,
        height: usize,
        width: usize,
    },

    #[error("graph error: {0}")]
    Graph(String),

    #[error("backward called before any forward pass was recorded")]
    BackwardBeforeForward,

    #[error("missing weight `{0}`")]
    MissingWeight(String),

    #[error("unexpected extra weight `{0}`")]
    ExtraWeight(String),

    #[error("weight `{name}` has shape {found:?}, expected {expected:?}")]
    WeightShape {
        name: String,
        expected: Vec<usize>,
        found: Vec<usize>,
    },

    #[error("corrupt weight file header: {0}")]
    CorruptHeader(String),

    #[error("weight file data truncated while reading `{name}`")]
    TruncatedData { name: String },

    #[error("non-finite value in {context}")]
    NonFinite { context: String },

    #[error("manifest {path}: line {line}: {msg}")]
    Manifest {
        path: PathBuf,
        line: usize,
        msg: String,
    },

    #[error("manifest {path}: line {line}: unknown label `{label}`")]
    UnknownLabel {
        path: PathBuf,
        line: usize,
        label: String,
    },

    #[error("manifest {path}: line {line}: duplicate image path `{image}`")]
    DuplicatePath {
        path: PathBuf,
        line: usize,
        image: PathBuf,
    },

    #[error("empty dataset")]
    EmptyDataset,

    #[error("image {path}: {msg}")]
    Image { path: PathBuf, msg: String },

    #[error("config: {0}")]
    Config(String),

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn invalid(op: &'static str, msg: impl Into<String>) -> Self {
        Error::InvalidArgument {
            op,
            msg: msg.into(),
        }
    }

    pub(crate) fn shape(op: &'static str, lhs: &[usize], rhs: &[usize]) -> Self {
        Error::ShapeMismatch {
            op,
            lhs: lhs.to_vec(),
            rhs: rhs.to_vec(),
        }
    }

    /// Process exit code used by the CLI: 2 for data problems, 3 for numeric failures.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::NonFinite { .. } | Error::BackwardBeforeForward => 3,
            _ => 2,
        }
    }
}

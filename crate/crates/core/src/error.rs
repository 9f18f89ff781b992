use thiserror::Error;

/// Errors raised by the library.
#[derive(Debug, Error, Clone, PartialEq)]
pub enum Error {
    #[error("newick parse error at byte {position}: {message}")]
    Newick { position: usize, message: String },

    #[error("invalid topology: {0}")]
    Topology(String),

    #[error("leaf label sets differ: {0}")]
    LeafMismatch(String),

    #[error("invalid leaf subset: {0}")]
    Subset(String),

    #[error("invalid parameter: {0}")]
    Parameter(String),

    #[error("invalid matrix: {0}")]
    Matrix(String),

    #[error("infinite distance between {0} and {1}: affinity is zero")]
    InfiniteDistance(String, String),

    #[error("state {state} never observed at leaf {leaf}; conditional matrices are singular")]
    StarvedState { leaf: String, state: usize },

    #[error("character data format error at line {line}: {message}")]
    Format { line: usize, message: String },

    #[error("i/o error: {0}")]
    Io(String),
}

pub type Result<T> = std::result::Result<T, Error>;

impl From<std::io::Error> for Error {
    fn from(e: std::io::Error) -> Self {
        Error::Io(e.to_string())
    }
}

pub(crate) fn param<S: Into<String>>(msg: S) -> Error {
    Error::Parameter(msg.into())
}

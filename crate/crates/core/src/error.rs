use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("parse error at line {line}, column {col}: {msg}")]
    Parse { line: usize, col: usize, msg: String },

    #[error("unknown function '{0}'")]
    UnknownFunction(String),

    #[error("function '{name}' expects {expected} argument(s), got {got}")]
    ArityMismatch {
        name: String,
        expected: usize,
        got: usize,
    },

    #[error("shape mismatch: {msg} (lhs: {lhs}, rhs: {rhs})")]
    ShapeMismatch {
        msg: String,
        lhs: String,
        rhs: String,
    },

    #[error("unbound input '{0}'")]
    UnboundLeaf(String),

    #[error("missing metadata for input '{0}'")]
    MissingMeta(String),

    #[error("contract violation: {0}")]
    Contract(String),

    #[error("internal consistency error: {0}")]
    Internal(String),

    #[error("io error: {0}")]
    Io(String),
}

pub type Result<T> = std::result::Result<T, Error>;

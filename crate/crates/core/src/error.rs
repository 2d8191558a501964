use thiserror::Error;

/// Errors surfaced by the library. Contract violations (shape mismatches,
/// out-of-range indices) carry enough context to name the offending values.
#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch in {op}: {lhs:?} vs {rhs:?}")]
    ShapeMismatch {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },

    #[error("{op}: index {index} out of range for size {bound}")]
    IndexOutOfRange {
        op: &'static str,
        index: usize,
        bound: usize,
    },

    #[error("backward requires a scalar node, got shape {shape:?}")]
    NonScalarBackward { shape: Vec<usize> },

    #[error("invalid caption: {0}")]
    InvalidCaption(String),

    #[error("unknown token: {0:?}")]
    UnknownToken(String),

    #[error("{component} level {level} out of range for scheme of size {size}")]
    LevelOutOfRange {
        component: &'static str,
        level: usize,
        size: usize,
    },

    #[error("control signals cover different components: {0}")]
    ComponentMismatch(String),

    #[error("leave-one-out quality scoring needs at least 2 references, got {0}")]
    SingleReference(usize),

    #[error("image {id:?} has {got} references; this step needs at least {needed}")]
    TooFewReferences {
        id: String,
        got: usize,
        needed: usize,
    },

    #[error("empty target caption")]
    EmptyTarget,

    #[error("corpus file is empty")]
    EmptyCorpus,

    #[error("parse error at line {line}: {msg}")]
    Parse { line: usize, msg: String },

    #[error("vocab hash mismatch: checkpoint has {expected:#018x}, corpus has {found:#018x}")]
    VocabHashMismatch { expected: u64, found: u64 },

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

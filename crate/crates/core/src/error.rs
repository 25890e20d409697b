use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch in {op}: {lhs:?} vs {rhs:?}")]
    Dimension {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },

    #[error("axis {axis} out of bounds for rank {rank}")]
    Axis { axis: usize, rank: usize },

    #[error("{what} index {index} out of range (bound {bound})")]
    Index {
        what: &'static str,
        index: usize,
        bound: usize,
    },

    #[error("shape error: {0}")]
    Shape(String),

    #[error("degenerate variance: {0}")]
    DegenerateVariance(String),

    #[error("configuration error: {0}")]
    Config(String),

    #[error("routing error: {0}")]
    Routing(String),

    #[error("clustering error: {0}")]
    Clustering(String),

    #[error("pairing error: {left} contexts vs {right} contexts")]
    Pairing { left: usize, right: usize },

    #[error("sequence of length {len} exceeds max_seq_len {max}")]
    Truncation { len: usize, max: usize },

    #[error("line {line}: parse error: {msg}")]
    Parse { line: usize, msg: String },

    #[error("line {line}: schema error: missing or invalid field `{field}`")]
    Schema { line: usize, field: String },

    #[error("generation error: {0}")]
    Generation(String),

    #[error("degenerate configuration: {0}")]
    Degenerate(String),

    #[error("training diverged at step {step}: {component} is not finite")]
    Divergence { step: usize, component: String },

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error("missing artifact: {0}")]
    MissingArtifact(PathBuf),

    #[error("empty dataset")]
    EmptyDataset,

    #[error("audit failed: {0}")]
    Audit(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn dim(op: &'static str, lhs: &[usize], rhs: &[usize]) -> Self {
        Error::Dimension {
            op,
            lhs: lhs.to_vec(),
            rhs: rhs.to_vec(),
        }
    }
}

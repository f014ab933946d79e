use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),

    /// The matrix exponential produced non-finite entries or entries above the overflow cap.
    #[error("matrix exponential overflow (largest entry {max_entry:e})")]
    ExpOverflow { max_entry: f64 },

    #[error("leaf {leaf} of tree {tree}: {source}")]
    Leaf {
        tree: usize,
        leaf: usize,
        #[source]
        source: Box<Error>,
    },

    #[error("feature-sign did not converge within {iterations} iterations")]
    NonConvergence { iterations: usize },

    #[error("datum {index}: {source}")]
    Datum {
        index: usize,
        #[source]
        source: Box<Error>,
    },

    #[error("numerical failure: {0}")]
    Numerical(String),

    #[error("image format error: {0}")]
    Format(String),

    #[error("unsupported model version: {0}")]
    Version(String),

    #[error("inconsistent model: {0}")]
    Consistency(String),

    #[error("parse error at line {line}: {message}")]
    Parse { line: usize, message: String },

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

use std::path::PathBuf;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    /// Invalid user-supplied configuration (ranges, sizes, hyperparameters).
    #[error("configuration error: {0}")]
    Config(String),

    /// Malformed file contents. `offset` is a byte offset for binary files
    /// and a 1-based line number for text files.
    #[error("format error in {path} at {offset}: {msg}")]
    Format {
        path: String,
        offset: u64,
        msg: String,
    },

    /// Data that is well formed but inconsistent with what was asked for.
    #[error("data error: {0}")]
    Data(String),

    #[error("shape mismatch in {op}: {lhs:?} vs {rhs:?}")]
    Shape {
        op: &'static str,
        lhs: (usize, usize),
        rhs: (usize, usize),
    },

    #[error("non-finite value during {0}")]
    NonFinite(String),

    #[error("missing embedding files: {}", .0.iter().map(|p| p.display().to_string()).collect::<Vec<_>>().join(", "))]
    MissingEmbeddings(Vec<PathBuf>),

    #[error("aggregation needs at least 2 values, got {0}")]
    Aggregation(usize),

    #[error("every grid cell diverged: {0}")]
    GridDiverged(String),

    #[error("report error: {0}")]
    Report(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

impl Error {
    pub(crate) fn format(path: impl Into<String>, offset: u64, msg: impl Into<String>) -> Self {
        Error::Format {
            path: path.into(),
            offset,
            msg: msg.into(),
        }
    }
}

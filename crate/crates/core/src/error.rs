use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch in {op}: {lhs:?} vs {rhs:?}")]
    Shape {
        op: &'static str,
        lhs: (usize, usize),
        rhs: (usize, usize),
    },

    #[error("non-finite value entering {op}")]
    NonFinite { op: &'static str },

    #[error("non-finite gradient for parameter `{0}`")]
    NonFiniteGradient(String),

    #[error("backward root must be 1x1, got {rows}x{cols}")]
    NonScalarRoot { rows: usize, cols: usize },

    #[error("unknown parameter `{0}`")]
    UnknownParam(String),

    #[error("dimension mismatch: {0}")]
    Dimension(String),

    #[error("invalid topology query: {0}")]
    Topology(String),

    #[error("invalid action: {0}")]
    InvalidAction(String),

    #[error("configuration error: {0}")]
    Config(String),

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error("non-finite loss in {0}")]
    NonFiniteLoss(&'static str),

    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },

    #[error("malformed record in {path}: {message}")]
    Format { path: String, message: String },
}

impl Error {
    /// Short machine-readable category used by the CLI's one-line errors.
    pub fn kind(&self) -> &'static str {
        match self {
            Error::Shape { .. } | Error::Dimension(_) => "shape",
            Error::NonFinite { .. } | Error::NonFiniteGradient(_) | Error::NonFiniteLoss(_) => {
                "numeric"
            }
            Error::NonScalarRoot { .. } => "backward",
            Error::UnknownParam(_) | Error::Checkpoint(_) => "checkpoint",
            Error::Topology(_) => "topology",
            Error::InvalidAction(_) => "action",
            Error::Config(_) => "config",
            Error::Io { .. } => "io",
            Error::Format { .. } => "format",
        }
    }

    pub(crate) fn io(path: impl AsRef<std::path::Path>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.as_ref().display().to_string(),
            source,
        }
    }
}

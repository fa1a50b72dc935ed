use std::path::PathBuf;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("{source_name}: line {line}: {message}")]
    Parse {
        source_name: String,
        line: usize,
        message: String,
    },

    #[error("validation failed: {0}")]
    Validation(String),

    #[error("class {class} has {count} record(s); a stratified split needs at least 3")]
    InsufficientClass { class: String, count: usize },

    #[error("manifest is empty")]
    EmptyManifest,

    #[error("config error: {0}")]
    Config(String),

    #[error("schema error: {}", .0.join("; "))]
    Schema(Vec<String>),

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("face alignment failed: {0}")]
    Alignment(String),

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error("decode error: {0}")]
    Decode(String),

    #[error("model did not expose an attention record")]
    MissingAttention,

    #[error("non-finite loss at epoch {epoch}, batch {batch} (lr {lr:e}, pre-clip grad norm {grad_norm:e})")]
    NonFiniteLoss {
        epoch: usize,
        batch: usize,
        lr: f64,
        grad_norm: f64,
    },

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("{}: {source}", path.display())]
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

    /// Process exit status used by the CLI, one per error category.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config(_) | Error::Schema(_) | Error::InvalidArgument(_) => 2,
            Error::Io { .. } | Error::Decode(_) => 3,
            Error::Parse { .. }
            | Error::Validation(_)
            | Error::InsufficientClass { .. }
            | Error::EmptyManifest
            | Error::Alignment(_) => 4,
            Error::Shape(_) | Error::Checkpoint(_) | Error::MissingAttention => 5,
            Error::NonFiniteLoss { .. } => 6,
        }
    }
}

use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension error: {0}")]
    Dimension(String),

    #[error("config error: {0}")]
    Config(String),

    #[error("input error: {0}")]
    Input(String),

    #[error("lookup error: no feature map named `{0}`")]
    UnknownLayer(String),

    #[error("undefined kappa: {0}")]
    UndefinedKappa(String),

    #[error("numeric error: {0}")]
    NonFinite(String),

    #[error("graph error: {0}")]
    Graph(String),

    #[error("empty manifest: {0}")]
    EmptyManifest(PathBuf),

    #[error("{path}:{line}: {msg}")]
    Parse { path: PathBuf, line: u64, msg: String },

    #[error("image {path}: {msg}")]
    Image { path: PathBuf, msg: String },

    #[error("stratification: {0}")]
    Stratification(String),

    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),

    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub fn dim(msg: impl Into<String>) -> Self {
        Error::Dimension(msg.into())
    }

    pub fn config(msg: impl Into<String>) -> Self {
        Error::Config(msg.into())
    }

    pub fn input(msg: impl Into<String>) -> Self {
        Error::Input(msg.into())
    }

    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// Process exit code: 2 usage, 3 data, 4 config, 5 numeric.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config(_) | Error::Checkpoint(_) => 4,
            Error::NonFinite(_) => 5,
            Error::Dimension(_) | Error::Graph(_) | Error::UnknownLayer(_) => 4,
            Error::Input(_)
            | Error::UndefinedKappa(_)
            | Error::EmptyManifest(_)
            | Error::Parse { .. }
            | Error::Image { .. }
            | Error::Stratification(_)
            | Error::Io { .. } => 3,
        }
    }

    /// Short machine-readable category used in CLI error lines.
    pub fn kind(&self) -> &'static str {
        match self {
            Error::Dimension(_) => "dimension",
            Error::Config(_) => "config",
            Error::Input(_) => "input",
            Error::UnknownLayer(_) => "lookup",
            Error::UndefinedKappa(_) => "undefined-kappa",
            Error::NonFinite(_) => "numeric",
            Error::Graph(_) => "graph",
            Error::EmptyManifest(_) => "empty-manifest",
            Error::Parse { .. } => "parse",
            Error::Image { .. } => "image",
            Error::Stratification(_) => "stratification",
            Error::Checkpoint(_) => "checkpoint",
            Error::Io { .. } => "io",
        }
    }
}

/// Failures while decoding or validating a checkpoint container.
#[derive(Debug, Error, PartialEq, Eq)]
pub enum CheckpointError {
    #[error("bad magic bytes (expected OSTEOCKPT1)")]
    BadMagic,

    #[error("truncated checkpoint while reading {what}")]
    Truncated { what: String },

    #[error("tensor `{tensor}`: {msg}")]
    BadTensor { tensor: String, msg: String },

    #[error("unknown dtype tag {tag} for tensor `{tensor}`")]
    UnknownDtype { tensor: String, tag: u8 },

    #[error("config hash mismatch: checkpoint {found}, expected {expected}")]
    HashMismatch { expected: String, found: String },

    #[error("missing entry `{0}`")]
    Missing(String),

    #[error("{0} trailing bytes after config hash")]
    TrailingBytes(usize),
}

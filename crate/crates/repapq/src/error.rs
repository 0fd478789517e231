use std::path::{Path, PathBuf};

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("{path}: bad magic {found:?}, expected {expected:?}")]
    BadMagic {
        path: PathBuf,
        expected: &'static str,
        found: [u8; 4],
    },

    #[error("{path}: unsupported format version {version}")]
    Version { path: PathBuf, version: u32 },

    #[error("{path}: {what}")]
    Malformed { path: PathBuf, what: String },

    #[error("{path}: record {record} is truncated ({got} of {want} bytes)")]
    TruncatedRecord {
        path: PathBuf,
        record: usize,
        got: usize,
        want: usize,
    },

    #[error("missing tensor {0:?}")]
    MissingTensor(String),

    #[error("tensor {name:?} has shape {got:?}, expected {expected:?}")]
    TensorShape {
        name: String,
        expected: Vec<usize>,
        got: Vec<usize>,
    },

    #[error("{path}: {message}")]
    Manifest { path: PathBuf, message: String },

    #[error("{0}")]
    Config(String),

    #[error("{stage}: {source}")]
    Stage {
        stage: &'static str,
        #[source]
        source: Box<Error>,
    },

    #[error(transparent)]
    Core(#[from] repapq_core::Error),

    #[error("{0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub fn io(path: &Path, source: std::io::Error) -> Self {
        Self::Io {
            path: path.to_path_buf(),
            source,
        }
    }

    pub fn malformed(path: &Path, what: impl Into<String>) -> Self {
        Self::Malformed {
            path: path.to_path_buf(),
            what: what.into(),
        }
    }

    /// Process exit code: 2 validation, 3 numerical failure, 4 IO.
    pub fn exit_code(&self) -> i32 {
        use repapq_core::Error as C;
        match self {
            Self::Io { .. }
            | Self::BadMagic { .. }
            | Self::Version { .. }
            | Self::Malformed { .. }
            | Self::TruncatedRecord { .. }
            | Self::MissingTensor(_)
            | Self::TensorShape { .. } => 4,
            Self::Stage { source, .. } => source.exit_code(),
            Self::Core(C::NonFinite(_) | C::Diverged { .. } | C::DegenerateRange(_)) => 3,
            Self::Core(C::Storage(_)) => 4,
            _ => 2,
        }
    }
}

/// Tags errors from one pipeline stage.
pub trait StageExt<T> {
    fn stage(self, stage: &'static str) -> Result<T>;
}

impl<T, E: Into<Error>> StageExt<T> for std::result::Result<T, E> {
    fn stage(self, stage: &'static str) -> Result<T> {
        self.map_err(|e| Error::Stage {
            stage,
            source: Box::new(e.into()),
        })
    }
}

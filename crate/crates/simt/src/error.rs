use std::path::PathBuf;

use thiserror::Error;

/// Every failure the file layer and the pipeline can report.
#[derive(Debug, Error)]
pub enum Error {
    #[error("config error: {0}")]
    Config(String),

    #[error("missing dependency: expected `{}`", .0.display())]
    Missing(PathBuf),

    #[error("integrity failure: {0}")]
    Integrity(String),

    #[error("{}:{line}: {msg}", path.display())]
    Format { path: PathBuf, line: usize, msg: String },

    #[error("checkpoint `{}` has a bad magic number", .0.display())]
    BadMagic(PathBuf),

    #[error("checkpoint `{}` has unsupported format version {version}", path.display())]
    Version { path: PathBuf, version: u32 },

    #[error("checkpoint `{}` failed its checksum: {detail}", path.display())]
    Checksum { path: PathBuf, detail: String },

    #[error("{context}: {source}")]
    Io {
        context: String,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Core(#[from] simt_core::Error),

    #[error("{0}")]
    Other(String),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    /// Process exit code: 2 config, 3 missing dependency, 4 integrity, 1 otherwise.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config(_) => 2,
            Error::Missing(_) => 3,
            Error::Integrity(_) | Error::BadMagic(_) | Error::Version { .. } | Error::Checksum { .. } => 4,
            _ => 1,
        }
    }

    pub(crate) fn io(context: impl Into<String>, source: std::io::Error) -> Self {
        Error::Io {
            context: context.into(),
            source,
        }
    }
}

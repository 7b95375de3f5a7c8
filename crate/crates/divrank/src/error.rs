use std::io;
use std::path::PathBuf;

/// Failures while reading the on-disk corpus and checkpoint formats.
#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum FormatError {
    #[error("bad magic")]
    BadMagic,
    #[error("version mismatch: found {found}, expected {expected}")]
    VersionMismatch { found: String, expected: String },
    #[error("truncated blob: expected {expected} bytes, found {found}")]
    TruncatedBlob { expected: u64, found: u64 },
    #[error("checksum failure: stored {stored:08x}, computed {computed:08x}")]
    Checksum { stored: u32, computed: u32 },
    #[error("blob bounds: {0}")]
    BlobBounds(String),
    #[error("malformed manifest line {line}: {detail}")]
    Manifest { line: usize, detail: String },
    #[error("value {0} is not representable as a 32-bit float")]
    Lossy(f64),
    #[error("truncated checkpoint")]
    TruncatedCheckpoint,
    #[error("unsupported version {0}")]
    UnsupportedVersion(u32),
    #[error("malformed checkpoint: {0}")]
    Checkpoint(String),
    #[error("malformed run file line {line}: {detail}")]
    Run { line: usize, detail: String },
}

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: io::Error },
    #[error(transparent)]
    Format(#[from] FormatError),
    #[error(transparent)]
    Core(#[from] divrank_core::Error),
    #[error("configuration: {0}")]
    Config(String),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

pub fn io_err(path: impl Into<PathBuf>) -> impl FnOnce(io::Error) -> Error {
    let path = path.into();
    move |source| Error::Io { path, source }
}

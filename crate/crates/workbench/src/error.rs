// SPDX-License-Identifier: MIT OR Apache-2.0

use std::path::PathBuf;

pub type Result<T, E = WorkbenchError> = std::result::Result<T, E>;

#[derive(Debug, thiserror::Error)]
pub enum WorkbenchError {
    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("i/o error: {0}")]
    Stream(#[from] std::io::Error),

    #[error("not a {expected} file (magic bytes {found:02x?})")]
    BadMagic { expected: &'static str, found: Vec<u8> },

    #[error("format version {found} is newer than the supported version {supported}")]
    UnsupportedVersion { found: u32, supported: u32 },

    #[error("file ends inside {context}: expected {expected} bytes, got {actual}")]
    Truncated { context: String, expected: u64, actual: u64 },

    #[error("checksum mismatch in {0}")]
    Checksum(String),

    #[error("record #{index} has a name that is not valid UTF-8")]
    BadName { index: u64 },

    #[error("record `{0}` appears twice")]
    DuplicateName(String),

    #[error("record `{name}` declares rank {rank} dims {dims:?}, which is not a loadable tensor")]
    BadDims { name: String, rank: u64, dims: Vec<u64> },

    #[error("{0} trailing bytes after the last record")]
    TrailingData(u64),

    #[error("missing record `{0}`")]
    MissingRecord(String),

    #[error("dimension mismatch in `{field}`: expected {expected}, found {found}")]
    DimensionMismatch { field: String, expected: String, found: String },

    #[error("malformed {what}: {detail}")]
    Malformed { what: &'static str, detail: String },

    #[error("annotation record {id}: {detail}")]
    Annotation { id: u64, detail: String },

    #[error("another process holds the finetune lock {0}")]
    Locked(PathBuf),

    #[error(transparent)]
    Core(#[from] csae_core::Error),
}

impl WorkbenchError {
    pub fn io(path: impl Into<PathBuf>) -> impl FnOnce(std::io::Error) -> Self {
        let path = path.into();
        move |source| Self::Io { path, source }
    }

    pub(crate) fn json(what: &'static str) -> impl FnOnce(serde_json::Error) -> Self {
        move |e| Self::Malformed { what, detail: e.to_string() }
    }
}

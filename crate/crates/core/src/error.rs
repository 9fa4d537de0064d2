use std::path::PathBuf;

use diffmath::DiffError;
use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error(transparent)]
    Math(#[from] DiffError),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("missing parameter `{0}`")]
    MissingParam(String),

    #[error("{component} is not finite ({value})")]
    NonFiniteLoss { component: &'static str, value: f64 },

    #[error("{component}: {source}")]
    LossComponent { component: &'static str, source: DiffError },

    #[error("training diverged at epoch {epoch}, batch {batch}: {reason}")]
    Diverged { epoch: usize, batch: usize, reason: String },

    #[error("unknown strategy `{tag}`; valid tags: {valid}")]
    UnknownStrategy { tag: String, valid: String },

    #[error("audio prompts were already injected at layer {0}")]
    RepeatedInjection(usize),

    #[error("sequence of {len} rows exceeds max_seq_len {max}")]
    SequenceOverflow { len: usize, max: usize },

    #[error("degenerate domain map `{0}` (rank 0)")]
    DegenerateMap(String),

    #[error("teacher snapshot config hash does not match the student model")]
    TeacherMismatch,

    #[error("evaluation needs at least 2 test pairs, got {0}")]
    TooFewPairs(usize),

    #[error("anti-forgetting score undefined for `{0}`: recall@10 at introduction is 0")]
    UndefinedAfs(String),

    #[error("missing metric records: {0}")]
    MissingRecords(String),

    #[error("duplicate metric record {0}")]
    DuplicateRecord(String),

    #[error(transparent)]
    Snapshot(#[from] SnapshotError),

    #[error(transparent)]
    Manifest(#[from] ManifestError),

    #[error("io error on {path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
}

#[derive(Debug, Error)]
pub enum SnapshotError {
    #[error("not a snapshot file (bad magic)")]
    BadMagic,
    #[error("snapshot format version {found} is not supported (expected {expected})")]
    Version { found: u32, expected: u32 },
    #[error("snapshot truncated: {0}")]
    Truncated(&'static str),
    #[error("snapshot checksum mismatch: stored {stored:08x}, computed {computed:08x}")]
    Checksum { stored: u32, computed: u32 },
    #[error("snapshot config hash does not match the expected model configuration")]
    ConfigHash,
    #[error("snapshot io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("malformed snapshot: {0}")]
    Malformed(String),
}

#[derive(Debug, Error)]
pub enum ManifestError {
    #[error("manifest header must be `ptat-manifest v1`, found `{0}`")]
    Header(String),
    #[error("manifest line {line}: {reason}")]
    Parse { line: usize, reason: String },
    #[error("manifest line {line}: missing audio blob {path}")]
    MissingBlob { line: usize, path: PathBuf },
    #[error("manifest line {line}: blob {path} holds {found} floats, expected {rows}x{cols}")]
    Dimension { line: usize, path: PathBuf, rows: usize, cols: usize, found: usize },
    #[error("manifest line {line}: checksum mismatch for {path}: expected {expected:08x}, got {actual:08x}")]
    Checksum { line: usize, path: PathBuf, expected: u32, actual: u32 },
    #[error("manifest io error: {0}")]
    Io(#[from] std::io::Error),
}

pub(crate) fn io_err(path: impl Into<PathBuf>) -> impl FnOnce(std::io::Error) -> Error {
    let path = path.into();
    move |source| Error::Io { path, source }
}

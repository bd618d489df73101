use std::path::PathBuf;

/// Errors raised across the library.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("unknown task id {0}")]
    UnknownTask(usize),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("no object in the attribute table satisfies identifier {0:?}")]
    Unsatisfiable(String),

    #[error("attribute table line {line}: {msg}")]
    AttributeTable { line: usize, msg: String },

    #[error("episode already finished at t={0}")]
    EpisodeDone(usize),

    #[error(
        "task {task_id}: only {collected} of {wanted} successful demos after {attempts} attempts"
    )]
    Quota {
        task_id: usize,
        collected: usize,
        wanted: usize,
        attempts: usize,
    },

    #[error("task {0} has no trajectories")]
    EmptyBucket(usize),

    #[error("{path}: bad magic {found:?}, expected {expected:?}")]
    BadMagic {
        path: PathBuf,
        found: [u8; 4],
        expected: [u8; 4],
    },

    #[error("{path}: unsupported format version {found}")]
    UnsupportedVersion { path: PathBuf, found: u32 },

    #[error("{path}: file truncated")]
    Truncated { path: PathBuf },

    #[error("{path}: checksum mismatch in task {task_id}, trajectory {index}")]
    Checksum {
        path: PathBuf,
        task_id: usize,
        index: usize,
    },

    #[error("stored trajectory for task {task_id} (#{index}) does not pass the success check")]
    UnsuccessfulTrajectory { task_id: usize, index: usize },

    #[error("embedding cache miss for {0:?}")]
    CacheMiss(String),

    #[error("shape mismatch: expected {expected}, got {got}")]
    ShapeMismatch { expected: String, got: String },

    #[error("mode {mode} requires the {what} embedding")]
    MissingEmbedding { mode: String, what: &'static str },

    #[error("non-finite loss at step {step}: {detail}")]
    NonFinite { step: u64, detail: String },

    #[error("malformed file {path}: {msg}")]
    Malformed { path: PathBuf, msg: String },

    #[error(transparent)]
    Tensor(#[from] candle_core::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    /// True for errors that stem from unreadable or inconsistent data files.
    pub fn is_data_error(&self) -> bool {
        matches!(
            self,
            Error::BadMagic { .. }
                | Error::UnsupportedVersion { .. }
                | Error::Truncated { .. }
                | Error::Checksum { .. }
                | Error::UnsuccessfulTrajectory { .. }
                | Error::CacheMiss(_)
                | Error::Malformed { .. }
                | Error::Quota { .. }
                | Error::EmptyBucket(_)
                | Error::Csv(_)
                | Error::Io(_)
        )
    }
}

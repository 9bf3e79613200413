use std::path::PathBuf;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("{op}: shape mismatch {lhs:?} vs {rhs:?}")]
    Shape {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },
    #[error("{op}: {msg}")]
    Invalid { op: &'static str, msg: String },
    #[error("non-finite value in {0}")]
    NonFinite(String),
    #[error("config error: {0}")]
    Config(String),
    #[error("parse error at byte offset {offset}{}: {msg}", record.map(|r| format!(" (record {r})")).unwrap_or_default())]
    Parse {
        offset: u64,
        record: Option<usize>,
        msg: String,
    },
    #[error("checkpoint version mismatch: file has {found}, expected {expected}")]
    Version { found: u32, expected: u32 },
    #[error("parameter set mismatch: {0}")]
    ParamMismatch(String),
    #[error("missing emotion(s): {0:?}")]
    MissingEmotion(Vec<String>),
    #[error("unknown emotion {name:?}; valid: {valid}")]
    UnknownEmotion { name: String, valid: String },
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub(crate) fn invalid(op: &'static str, msg: impl Into<String>) -> Self {
        Error::Invalid {
            op,
            msg: msg.into(),
        }
    }

    pub(crate) fn shape(op: &'static str, lhs: &[usize], rhs: &[usize]) -> Self {
        Error::Shape {
            op,
            lhs: lhs.to_vec(),
            rhs: rhs.to_vec(),
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}

impl Error {
    /// Process exit code: 2 config, 3 numeric, 4 I/O or file format.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config(_)
            | Error::ParamMismatch(_)
            | Error::MissingEmotion(_)
            | Error::UnknownEmotion { .. }
            | Error::Invalid { .. } => 2,
            Error::NonFinite(_) | Error::Shape { .. } => 3,
            Error::Io { .. } | Error::Parse { .. } | Error::Version { .. } => 4,
        }
    }
}

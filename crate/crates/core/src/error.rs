use std::path::PathBuf;

/// Errors raised anywhere in the pipeline.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("shape error: {0}")]
    Shape(String),

    #[error("non-finite value in {0}")]
    NonFinite(String),

    #[error("frame alignment error: {left} has {left_frames} frames but {right} has {right_frames}")]
    Alignment {
        left: String,
        left_frames: usize,
        right: String,
        right_frames: usize,
    },

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("parameter `{0}` has no gradient; run a backward pass before stepping")]
    MissingGrad(String),

    #[error("duplicate parameter name `{0}`")]
    DuplicateParam(String),

    #[error("loss function is not deterministic: {first} != {second}")]
    NonDeterministic { first: f64, second: f64 },

    #[error("{path}: {msg}")]
    Format { path: PathBuf, msg: String },

    #[error("{path}:{line}: {msg}")]
    Manifest {
        path: PathBuf,
        line: usize,
        msg: String,
    },

    #[error("label out of range: {0}")]
    Label(String),

    #[error("unresolved features for {} utterance(s): {}", .ids.len(), .ids.join(", "))]
    MissingFeatures { ids: Vec<String> },

    #[error("audio error in {path}: {msg}")]
    Audio { path: PathBuf, msg: String },

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn format(path: impl Into<PathBuf>, msg: impl Into<String>) -> Self {
        Error::Format {
            path: path.into(),
            msg: msg.into(),
        }
    }

    /// True for failures caused by numerical blow-up rather than bad input.
    pub fn is_numeric(&self) -> bool {
        matches!(self, Error::NonFinite(_) | Error::NonDeterministic { .. })
    }
}

pub type Result<T> = std::result::Result<T, Error>;

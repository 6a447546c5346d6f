use std::path::PathBuf;

/// Errors produced by the aesthetic field library.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("domain error: {0}")]
    Domain(String),

    #[error("pose has roll {roll:.3e} rad, cannot decompose into yaw/pitch")]
    Decomposition { roll: f64 },

    #[error("parse error at byte {offset}: {reason}")]
    Parse { offset: usize, reason: String },

    #[error("invalid {what} at byte {offset}: {reason}")]
    Validation {
        what: &'static str,
        offset: usize,
        reason: String,
    },

    #[error("malformed input: {0}")]
    Malformed(String),

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("render context contract violated: {0}")]
    Contract(String),

    #[error("non-finite loss at iteration {iteration}")]
    Diverged { iteration: usize },

    #[error("undefined correlation{}: {reason}", scene.as_ref().map(|s| format!(" for scene '{s}'")).unwrap_or_default())]
    UndefinedCorrelation {
        reason: String,
        scene: Option<String>,
    },

    #[error("no viable viewpoint: every candidate renders empty")]
    NoViableViewpoint,

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

    pub(crate) fn domain(msg: impl Into<String>) -> Self {
        Error::Domain(msg.into())
    }
}

pub type Result<T> = std::result::Result<T, Error>;

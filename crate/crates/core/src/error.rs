use std::io;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch: {left} vs {right}")]
    Shape { left: String, right: String },

    #[error("invalid input: {0}")]
    Input(String),

    #[error("box {0} produces an empty map after clamping to the image")]
    EmptyMap(String),

    #[error("contract violation: {0}")]
    Contract(String),

    #[error("track {track_id} last seen at frame {last_seen}, too old to fill frame {frame}")]
    StaleTrack {
        track_id: u64,
        last_seen: usize,
        frame: usize,
    },

    #[error("unsatisfiable scene: {0}")]
    Spec(String),

    #[error("corrupt mask: {0}")]
    CorruptMask(String),

    #[error("bad parameter file magic: expected OBJPROP1")]
    BadMagic,

    #[error("parameter file truncated: needed {needed} bytes, found {found}")]
    Truncated { needed: usize, found: usize },

    #[error("parameter shape mismatch: {0}")]
    ParamShape(String),

    #[error("config: {0}")]
    Config(String),

    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: io::Error,
    },

    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn shape(left: impl Into<String>, right: impl Into<String>) -> Self {
        Error::Shape {
            left: left.into(),
            right: right.into(),
        }
    }

    pub(crate) fn io(path: impl AsRef<std::path::Path>, source: io::Error) -> Self {
        Error::Io {
            path: path.as_ref().display().to_string(),
            source,
        }
    }

    /// Process exit code for this error: 1 for anything caused by the
    /// caller's inputs, 2 for environment failures.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Io { .. } => 2,
            _ => 1,
        }
    }
}

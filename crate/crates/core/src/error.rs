use std::io;
use std::path::PathBuf;

use crate::provider::ProviderError;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("parse error: {0}")]
    Parse(String),

    #[error("schema error in `{field}`: {rule}")]
    Schema { field: String, rule: String },

    #[error("invalid distribution: {0}")]
    Distribution(String),

    #[error(transparent)]
    Provider(#[from] ProviderError),

    #[error("malformed model output after {attempts} attempt(s): {reason}")]
    Format { attempts: u32, reason: String },

    #[error("unknown device `{0}`")]
    UnknownDevice(String),

    #[error("device `{device}` does not support action `{action}`")]
    UnsupportedAction { device: String, action: String },

    #[error("sequence error in stream `{stream}`: expected seq {expected}, got {got}")]
    Sequence {
        stream: String,
        expected: u64,
        got: u64,
    },

    #[error("integrity error in stream `{stream}`{}: {reason}", .seq.map(|s| format!(" at seq {s}")).unwrap_or_default())]
    Integrity {
        stream: String,
        seq: Option<u64>,
        reason: String,
    },

    #[error("dimension mismatch: {0} vs {1}")]
    Dimension(usize, usize),

    #[error("zero-norm vector")]
    ZeroVector,

    #[error("degenerate sample: {0}")]
    DegenerateSample(String),

    #[error("precondition violated: {0}")]
    Precondition(String),

    #[error("i/o error at {}: {source}", .path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: io::Error,
    },
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn schema(field: impl Into<String>, rule: impl Into<String>) -> Self {
        Error::Schema {
            field: field.into(),
            rule: rule.into(),
        }
    }
}

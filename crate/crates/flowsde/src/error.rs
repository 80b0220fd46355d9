use std::path::PathBuf;

/// Library-wide error type.
///
/// Numerical routines reject out-of-domain inputs instead of propagating
/// NaNs; the rollout wraps whatever a step raised together with the
/// (sample, step) pair that raised it.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("{op}: {name} = {value} outside {domain}")]
    Domain {
        op: &'static str,
        name: &'static str,
        value: f64,
        domain: &'static str,
    },

    #[error("{op}: {message}")]
    Invalid { op: &'static str, message: String },

    #[error("{op}: dimension mismatch (expected {expected}, got {got})")]
    Dim {
        op: &'static str,
        expected: usize,
        got: usize,
    },

    #[error("rollout failed at sample {sample}, step {step}: {source}")]
    Rollout {
        sample: usize,
        step: usize,
        #[source]
        source: Box<Error>,
    },

    #[error("config: {0}")]
    Config(String),

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub fn invalid(op: &'static str, message: impl Into<String>) -> Self {
        Error::Invalid {
            op,
            message: message.into(),
        }
    }

    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;

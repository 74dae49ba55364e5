use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch in {context}: expected {expected}, got {actual}")]
    DimensionMismatch {
        context: &'static str,
        expected: String,
        actual: String,
    },

    #[error("invalid matrix {name}: {reason}")]
    InvalidMatrix { name: &'static str, reason: String },

    #[error("parameter is not stabilizable: {0}")]
    NonStabilizable(String),

    #[error("unstable rollout: state norm {norm:.3e} exceeded ceiling {ceiling:.3e} at step {step}")]
    UnstableRollout { step: usize, norm: f64, ceiling: f64 },

    #[error("domain error: {0}")]
    Domain(String),

    #[error("precision matrix is not positive definite: {0}")]
    SingularPrecision(String),

    #[error("config error in `{key}`: {message}")]
    Config { key: String, message: String },

    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub(crate) fn dims(context: &'static str, expected: impl ToString, actual: impl ToString) -> Self {
        Error::DimensionMismatch {
            context,
            expected: expected.to_string(),
            actual: actual.to_string(),
        }
    }

    pub(crate) fn config(key: impl Into<String>, message: impl Into<String>) -> Self {
        Error::Config {
            key: key.into(),
            message: message.into(),
        }
    }

    pub(crate) fn io(path: &std::path::Path, source: std::io::Error) -> Self {
        Error::Io {
            path: path.display().to_string(),
            source,
        }
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

//! Crate-wide error type.

/// Errors produced by any stage of the pipeline.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    /// Filesystem-level failure, annotated with the offending path.
    #[error("i/o error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },

    /// A malformed dataset manifest row or header.
    #[error("manifest {path}:{line}: {msg}")]
    Manifest {
        path: String,
        line: usize,
        msg: String,
    },

    /// A signal file that cannot be decoded.
    #[error("signal file {path}: {msg}")]
    Signal { path: String, msg: String },

    /// Invalid run configuration (bad value, inconsistent fields, ...).
    #[error("invalid config: {0}")]
    Config(String),

    /// Operand shapes that do not fit the requested tape operation.
    #[error("shape mismatch in {op}: {details}")]
    Shape { op: String, details: String },

    /// A NaN or infinity surfaced where a finite value is required.
    #[error("non-finite value in {0}")]
    NonFinite(String),

    /// Dataset or episode construction problems (missing classes,
    /// not enough samples per class, unknown domains, ...).
    #[error("{0}")]
    Data(String),

    /// A checkpoint file that cannot be read or does not match.
    #[error("checkpoint {path}: {msg}")]
    Checkpoint { path: String, msg: String },
}

impl Error {
    /// Convenience constructor for [`Error::Io`].
    pub fn io(path: impl Into<String>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// Convenience constructor for [`Error::Shape`].
    pub fn shape(op: impl Into<String>, details: impl Into<String>) -> Self {
        Error::Shape {
            op: op.into(),
            details: details.into(),
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;

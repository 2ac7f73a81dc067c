use std::path::PathBuf;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    /// A numeric argument was out of range or non-finite.
    #[error("invalid parameter: {0}")]
    InvalidParameter(String),

    /// Shapes that must agree did not.
    #[error("dimension mismatch: {0}")]
    Dimension(String),

    /// A configuration value failed validation before any work started.
    #[error("invalid configuration: {0}")]
    Config(String),

    /// An operation was called on an object in the wrong state.
    #[error("{0}")]
    State(String),

    /// A dataset file was missing, truncated, or malformed.
    #[error("data error: {0}")]
    Data(String),

    /// A checkpoint file could not be read, written, or understood.
    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    /// Angle fitting could not get close enough to the requested filter.
    #[error("no angle pair reproduces the target filter: best residual {best_residual:.3e} exceeds {limit:.1e}")]
    NoFit { best_residual: f64, limit: f64 },

    /// Training produced a NaN or infinite loss.
    #[error("training diverged: non-finite loss at epoch {epoch}, batch {batch} ({detail})")]
    NonFinite {
        epoch: usize,
        batch: usize,
        detail: String,
    },

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// Process exit code for the CLI: 1 = bad configuration or arguments,
    /// 2 = data/IO problems, 3 = training divergence.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::InvalidParameter(_)
            | Error::Dimension(_)
            | Error::Config(_)
            | Error::State(_)
            | Error::Checkpoint(_)
            | Error::NoFit { .. } => 1,
            Error::Data(_) | Error::Io { .. } => 2,
            Error::NonFinite { .. } => 3,
        }
    }
}

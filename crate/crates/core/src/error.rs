use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("numerical divergence: non-finite state after step {step}")]
    Divergence { step: usize },

    #[error("training diverged at epoch {epoch}: {source}")]
    TrainingDivergence {
        epoch: usize,
        #[source]
        source: Box<Error>,
    },

    #[error("degenerate source latent: direction from the mean latent is undefined")]
    DegenerateSource,

    #[error("degenerate input: {0}")]
    Degenerate(String),

    #[error("configuration error: {0}")]
    Config(String),

    #[error("trajectory-consistency loss requested before any forward pass cached a trajectory")]
    MissingTrajectory,

    #[error("malformed parameter file: {0}")]
    Format(String),

    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidArgument(msg.into())
    }

    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}

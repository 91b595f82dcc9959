use std::path::PathBuf;

use cellnas_tensor::TensorError;
use thiserror::Error;

use crate::search::Trajectory;

#[derive(Debug, Error)]
pub enum NasError {
    #[error(transparent)]
    Tensor(#[from] TensorError),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("invalid cell spec: {0}")]
    Spec(String),

    #[error("invalid genotype: {0}")]
    Genotype(String),

    #[error("unsupported query: {0}")]
    Unsupported(String),

    #[error("data error: {0}")]
    Data(String),

    #[error("{path}:{line}: {message}")]
    Parse {
        path: PathBuf,
        line: usize,
        message: String,
    },

    #[error("{}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("numerical failure: {0}")]
    Numerical(String),

    /// A search produced a non-finite loss; carries everything logged so far.
    #[error("diverged at iteration {iteration}: {message}")]
    Diverged {
        iteration: usize,
        message: String,
        partial: Box<Trajectory>,
    },
}

impl NasError {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        NasError::Io {
            path: path.into(),
            source,
        }
    }

    /// True for failures caused by the numbers rather than the inputs.
    pub fn is_numerical(&self) -> bool {
        matches!(self, NasError::Numerical(_) | NasError::Diverged { .. })
    }
}

pub type Result<T> = std::result::Result<T, NasError>;

use thiserror::Error;

use crate::mesh::MeshError;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error(transparent)]
    Mesh(#[from] MeshError),

    #[error("dimension mismatch in {context}: expected {expected}, got {got}")]
    DimensionMismatch {
        context: &'static str,
        expected: usize,
        got: usize,
    },

    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("precondition violated: {0}")]
    Precondition(String),

    #[error("eigensolver did not converge: max residual {residual:.3e} after {iterations} steps")]
    NoConvergence { residual: f64, iterations: usize },

    #[error("near-degenerate spectrum: minimum gap {gap:.3e} is below tau = {tau:.3e}")]
    NearDegenerateSpectrum { gap: f64, tau: f64 },

    #[error("singular system: {0}")]
    SingularSystem(String),

    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },

    #[error("parse error in {context} at line {line}: {message}")]
    Parse {
        context: String,
        line: usize,
        message: String,
    },
}

impl Error {
    pub(crate) fn io(path: impl AsRef<std::path::Path>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.as_ref().display().to_string(),
            source,
        }
    }

    pub(crate) fn check_dim(context: &'static str, expected: usize, got: usize) -> Result<()> {
        if expected != got {
            return Err(Error::DimensionMismatch {
                context,
                expected,
                got,
            });
        }
        Ok(())
    }
}

use std::io;

use thiserror::Error;

/// Errors raised by the library.
#[derive(Debug, Error)]
pub enum Error {
    /// Invalid argument or configuration value.
    #[error("invalid parameter: {0}")]
    Parameter(String),

    /// Input outside the domain of a kernel formula (e.g. a zero-norm vector).
    #[error("domain error: {0}")]
    Domain(String),

    /// Malformed binary or text file.
    #[error("format error: {0}")]
    Format(String),

    /// Linear-algebra failure or ill-conditioned system.
    #[error("numerical error: {0}")]
    Numerical(String),

    /// Training produced a non-finite or exploding loss.
    #[error("training diverged at epoch {epoch}: loss = {loss}")]
    Divergence { epoch: usize, loss: f64 },

    /// A quantity that is mathematically undefined for the given inputs.
    #[error("undefined: {0}")]
    Undefined(String),

    #[error(transparent)]
    Io(#[from] io::Error),
}

impl Error {
    pub(crate) fn param(msg: impl Into<String>) -> Self {
        Error::Parameter(msg.into())
    }

    /// True for failures of the numerical kind (as opposed to bad input or I/O).
    pub fn is_numerical(&self) -> bool {
        matches!(
            self,
            Error::Numerical(_) | Error::Divergence { .. } | Error::Domain(_) | Error::Undefined(_)
        )
    }
}

pub type Result<T> = std::result::Result<T, Error>;

use std::io;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    /// A tensor did not have the shape an operation expected.
    #[error("{context}: shape mismatch in {dimension}: expected {expected}, found {found}")]
    Shape {
        context: String,
        dimension: String,
        expected: String,
        found: String,
    },

    #[error("{context}: produced a non-finite value")]
    NonFinite { context: String },

    #[error("invalid {what}: {reason}")]
    InvalidArgument { what: &'static str, reason: String },

    #[error("not a probability vector: {0}")]
    NotAProbability(String),

    #[error("exact Shapley enumeration refused for {players} players (limit {limit})")]
    TooManyPlayers { players: usize, limit: usize },

    #[error("training diverged at epoch {epoch}, batch {batch}: loss is {loss}")]
    Diverged { epoch: usize, batch: usize, loss: f64 },

    #[error("checkpoint: {0}")]
    Checkpoint(String),

    #[error("{format}: {reason}")]
    Format { format: &'static str, reason: String },

    #[error(transparent)]
    Io(#[from] io::Error),
}

impl Error {
    pub(crate) fn shape(
        context: impl Into<String>,
        dimension: impl Into<String>,
        expected: impl ToString,
        found: impl ToString,
    ) -> Self {
        Error::Shape {
            context: context.into(),
            dimension: dimension.into(),
            expected: expected.to_string(),
            found: found.to_string(),
        }
    }

    pub(crate) fn invalid(what: &'static str, reason: impl Into<String>) -> Self {
        Error::InvalidArgument {
            what,
            reason: reason.into(),
        }
    }

    pub(crate) fn format(format: &'static str, reason: impl Into<String>) -> Self {
        Error::Format {
            format,
            reason: reason.into(),
        }
    }

    /// True when the error stems from bad input rather than a bug or a
    /// numerical failure inside the library.
    pub fn is_user_error(&self) -> bool {
        !matches!(self, Error::NonFinite { .. } | Error::Diverged { .. })
    }
}

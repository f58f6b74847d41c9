use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum CliError {
    #[error(transparent)]
    Core(#[from] dncshap::Error),

    /// A library error tied to one input or output file.
    #[error("{}: {source}", path.display())]
    File {
        path: PathBuf,
        #[source]
        source: dncshap::Error,
    },

    #[error("{}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("{}: {reason}", path.display())]
    Input { path: PathBuf, reason: String },

    #[error("{0}")]
    Usage(String),

    #[error("internal error: {0}")]
    Internal(String),
}

impl CliError {
    pub fn exit_code(&self) -> u8 {
        match self {
            CliError::Core(e) | CliError::File { source: e, .. } if !e.is_user_error() => 2,
            CliError::Internal(_) => 2,
            _ => 1,
        }
    }

    pub fn file(path: impl Into<PathBuf>) -> impl FnOnce(dncshap::Error) -> CliError {
        let path = path.into();
        move |source| CliError::File { path, source }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn exit_codes() {
        let user = dncshap::labels::relabel("contempt").unwrap_err();
        assert_eq!(CliError::Core(user).exit_code(), 1);
        let diverged = dncshap::Error::Diverged {
            epoch: 1,
            batch: 0,
            loss: f64::NAN,
        };
        assert_eq!(CliError::file("x")(diverged).exit_code(), 2);
        assert_eq!(CliError::Usage("x".into()).exit_code(), 1);
        assert_eq!(CliError::Internal("x".into()).exit_code(), 2);
    }
}

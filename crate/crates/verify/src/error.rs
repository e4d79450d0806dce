use thiserror::Error;

#[derive(Debug, Error)]
pub enum VerifyError {
    #[error("config rejected: {0}")]
    Config(String),
    /// A library diagnostic, with the experiment it aborted.
    #[error("{context}: {source}")]
    Core {
        context: String,
        #[source]
        source: nczw_core::Error,
    },
    #[error("{0}")]
    Io(#[from] std::io::Error),
    #[error("report: {0}")]
    Report(String),
}

pub type Result<T> = std::result::Result<T, VerifyError>;

/// Attaches experiment coordinates to library errors.
pub trait Context<T> {
    fn context(self, what: impl FnOnce() -> String) -> Result<T>;
}

impl<T> Context<T> for nczw_core::Result<T> {
    fn context(self, what: impl FnOnce() -> String) -> Result<T> {
        self.map_err(|source| VerifyError::Core { context: what(), source })
    }
}

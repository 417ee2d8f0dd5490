use thiserror::Error;

/// Errors surfaced by the library.
#[derive(Debug, Error)]
pub enum Error {
    /// A precondition or type invariant was violated.
    #[error("invalid input: {0}")]
    Invalid(String),

    /// Track or experiment file could not be parsed.
    #[error("parse error: {0}")]
    Parse(String),

    /// A configuration value violates a documented invariant.
    #[error("config error in `{field}`: {message}")]
    Config { field: String, message: String },
}

impl Error {
    pub fn invalid(msg: impl Into<String>) -> Self {
        Error::Invalid(msg.into())
    }

    pub fn config(field: impl Into<String>, message: impl Into<String>) -> Self {
        Error::Config {
            field: field.into(),
            message: message.into(),
        }
    }
}

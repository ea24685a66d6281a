use std::fmt;

/// Crate-wide error type. Variants carry enough context to print a single
/// actionable line; callers that need machine-readable output serialize
/// `code()` plus the display string.
#[derive(Debug)]
pub enum Error {
    /// A shape, size, or config value violates a documented precondition.
    Invalid { what: String },
    /// Two components that must agree (configs, vocabularies, grids) do not.
    Mismatch { what: String },
    /// A numeric invariant broke at runtime (non-finite loss, NaN gradient).
    Numeric { what: String },
    /// Filesystem or serialization failure, with the path involved.
    Io { path: String, source: std::io::Error },
    /// A persisted artifact (checkpoint, corpus, config) failed validation.
    Corrupt { path: String, what: String },
}

impl Error {
    pub fn invalid(what: impl Into<String>) -> Self {
        Error::Invalid { what: what.into() }
    }

    pub fn mismatch(what: impl Into<String>) -> Self {
        Error::Mismatch { what: what.into() }
    }

    pub fn numeric(what: impl Into<String>) -> Self {
        Error::Numeric { what: what.into() }
    }

    pub fn io(path: impl AsRef<std::path::Path>, source: std::io::Error) -> Self {
        Error::Io { path: path.as_ref().display().to_string(), source }
    }

    pub fn corrupt(path: impl AsRef<std::path::Path>, what: impl Into<String>) -> Self {
        Error::Corrupt { path: path.as_ref().display().to_string(), what: what.into() }
    }

    /// Stable short code for machine-readable error lines.
    pub fn code(&self) -> &'static str {
        match self {
            Error::Invalid { .. } => "invalid",
            Error::Mismatch { .. } => "mismatch",
            Error::Numeric { .. } => "numeric",
            Error::Io { .. } => "io",
            Error::Corrupt { .. } => "corrupt",
        }
    }
}

impl fmt::Display for Error {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Error::Invalid { what } => write!(f, "invalid argument: {what}"),
            Error::Mismatch { what } => write!(f, "mismatch: {what}"),
            Error::Numeric { what } => write!(f, "numeric failure: {what}"),
            Error::Io { path, source } => write!(f, "io error at {path}: {source}"),
            Error::Corrupt { path, what } => write!(f, "corrupt artifact at {path}: {what}"),
        }
    }
}

impl std::error::Error for Error {
    fn source(&self) -> Option<&(dyn std::error::Error + 'static)> {
        match self {
            Error::Io { source, .. } => Some(source),
            _ => None,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;

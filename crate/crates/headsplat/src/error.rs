use std::path::Path;

/// Error carried to the CLI; `kind` selects the exit code.
#[derive(Debug, thiserror::Error)]
#[error("{message}")]
pub struct CliError {
    pub kind: ErrorKind,
    pub message: String,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ErrorKind {
    Validation,
    Runtime,
    Numerical,
}

impl ErrorKind {
    pub fn exit_code(self) -> i32 {
        match self {
            ErrorKind::Validation => 1,
            ErrorKind::Runtime => 2,
            ErrorKind::Numerical => 3,
        }
    }
}

impl CliError {
    pub fn validation(message: impl Into<String>) -> Self {
        CliError {
            kind: ErrorKind::Validation,
            message: message.into(),
        }
    }

    pub fn runtime(message: impl Into<String>) -> Self {
        CliError {
            kind: ErrorKind::Runtime,
            message: message.into(),
        }
    }

    pub fn exit_code(&self) -> i32 {
        self.kind.exit_code()
    }

    /// Prefixes the message with some context.
    pub fn context(self, what: impl std::fmt::Display) -> Self {
        CliError {
            kind: self.kind,
            message: format!("{what}: {}", self.message),
        }
    }
}

impl From<headsplat_core::Error> for CliError {
    fn from(e: headsplat_core::Error) -> Self {
        let kind = match e {
            headsplat_core::Error::NonFinite { .. } => ErrorKind::Numerical,
            _ => ErrorKind::Runtime,
        };
        CliError {
            kind,
            message: e.to_string(),
        }
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::runtime(e.to_string())
    }
}

pub type Result<T, E = CliError> = std::result::Result<T, E>;

pub(crate) fn io_context<T>(r: std::io::Result<T>, path: &Path) -> Result<T> {
    r.map_err(|e| CliError::runtime(format!("{}: {e}", path.display())))
}

/// Parse failure in a named file.
pub(crate) fn malformed(path: &Path, msg: impl std::fmt::Display) -> CliError {
    CliError::validation(format!("{}: {msg}", path.display()))
}

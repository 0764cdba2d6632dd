//! Error classification and the exit-code contract.

use serde::Serialize;

/// Why a command failed; each kind has a fixed exit status.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum ErrorKind {
    /// Malformed command line.
    Usage,
    /// Inputs exist but are invalid or missing (bad catalog, no models, ...).
    Validation,
    /// Anything else: I/O, codec, diverged training, server failure.
    Runtime,
}

impl ErrorKind {
    pub fn exit_code(self) -> i32 {
        match self {
            ErrorKind::Usage => 2,
            ErrorKind::Validation => 3,
            ErrorKind::Runtime => 4,
        }
    }
}

#[derive(Debug)]
pub struct CliError {
    pub kind: ErrorKind,
    pub error: anyhow::Error,
}

pub type CliResult<T> = Result<T, CliError>;

impl CliError {
    pub fn validation(msg: impl std::fmt::Display) -> Self {
        Self { kind: ErrorKind::Validation, error: anyhow::anyhow!("{msg}") }
    }

    pub fn runtime(error: impl Into<anyhow::Error>) -> Self {
        Self { kind: ErrorKind::Runtime, error: error.into() }
    }

    pub fn usage(msg: impl std::fmt::Display) -> Self {
        Self { kind: ErrorKind::Usage, error: anyhow::anyhow!("{msg}") }
    }

    /// Adds context while keeping the classification.
    pub fn context(self, ctx: impl std::fmt::Display + Send + Sync + 'static) -> Self {
        Self { kind: self.kind, error: self.error.context(ctx) }
    }

    /// Single-line JSON description for standard error.
    pub fn json_line(&self) -> String {
        #[derive(Serialize)]
        struct Line<'a> {
            error: Body<'a>,
        }
        #[derive(Serialize)]
        struct Body<'a> {
            kind: ErrorKind,
            exit_code: i32,
            message: &'a str,
        }
        let message = format!("{:#}", self.error);
        serde_json::to_string(&Line {
            error: Body { kind: self.kind, exit_code: self.kind.exit_code(), message: &message },
        })
        .expect("error line serializes")
    }
}

impl From<docsynth::Error> for CliError {
    fn from(e: docsynth::Error) -> Self {
        let kind = if e.is_validation() { ErrorKind::Validation } else { ErrorKind::Runtime };
        Self { kind, error: e.into() }
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        Self::runtime(e)
    }
}

/// Attaches context to core results.
pub trait ResultExt<T> {
    fn ctx(self, ctx: impl std::fmt::Display + Send + Sync + 'static) -> CliResult<T>;
}

impl<T, E: Into<CliError>> ResultExt<T> for Result<T, E> {
    fn ctx(self, ctx: impl std::fmt::Display + Send + Sync + 'static) -> CliResult<T> {
        self.map_err(|e| e.into().context(ctx))
    }
}

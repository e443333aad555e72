use std::fmt;

use memgauge_core::Error as CoreError;

pub const EXIT_USAGE: i32 = 2;
pub const EXIT_FAILURE: i32 = 3;
pub const EXIT_MISSING: i32 = 4;

/// A command failure with its process exit code.
#[derive(Debug, Clone, PartialEq)]
pub struct CliError {
    pub code: i32,
    pub kind: &'static str,
    pub message: String,
}

impl CliError {
    pub fn usage(message: impl Into<String>) -> Self {
        Self {
            code: EXIT_USAGE,
            kind: "usage",
            message: message.into(),
        }
    }

    pub fn failure(message: impl Into<String>) -> Self {
        Self {
            code: EXIT_FAILURE,
            kind: "estimation",
            message: message.into(),
        }
    }

    pub fn missing(paths: &[String]) -> Self {
        Self {
            code: EXIT_MISSING,
            kind: "missing_artifacts",
            message: format!("missing artifacts: {}", paths.join(", ")),
        }
    }

    pub fn conflict(path: &str) -> Self {
        Self {
            code: EXIT_USAGE,
            kind: "artifact_conflict",
            message: format!(
                "{path} already exists with different content; use a new run_id or output directory"
            ),
        }
    }

    /// Compact single-line JSON for stderr.
    pub fn to_json_line(&self) -> String {
        serde_json::json!({
            "error": self.kind,
            "exit_code": self.code,
            "message": self.message,
        })
        .to_string()
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{} (exit {}): {}", self.kind, self.code, self.message)
    }
}

impl std::error::Error for CliError {}

impl From<CoreError> for CliError {
    fn from(e: CoreError) -> Self {
        match e {
            CoreError::EmptyTrainingSet
            | CoreError::Divergence { .. }
            | CoreError::Estimation(_)
            | CoreError::DegenerateTest(_)
            | CoreError::EmptyData => Self::failure(e.to_string()),
            _ => Self::usage(e.to_string()),
        }
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        Self {
            code: EXIT_FAILURE,
            kind: "io",
            message: e.to_string(),
        }
    }
}

pub type CliResult<T> = std::result::Result<T, CliError>;

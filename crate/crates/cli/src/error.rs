use std::fmt;

/// Errors surfaced by the command-line runner.
#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("parse error at line {line}, column {column}: {message}")]
    Parse {
        line: usize,
        column: usize,
        message: String,
    },

    #[error("invalid value for `{key}`: {message}")]
    Validation { key: String, message: String },

    #[error("simulation failed: {0}")]
    Simulation(#[from] finform::Error),

    #[error("i/o error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

/// Process exit status.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ExitStatus {
    Ok = 0,
    CheckFailed = 1,
    BlowUp = 2,
    ConfigError = 3,
}

impl fmt::Display for ExitStatus {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", *self as i32)
    }
}

impl CliError {
    pub fn validation(key: impl Into<String>, message: impl Into<String>) -> Self {
        Self::Validation {
            key: key.into(),
            message: message.into(),
        }
    }

    pub fn exit_status(&self) -> ExitStatus {
        match self {
            Self::Simulation(finform::Error::NonFiniteState { .. }) => ExitStatus::BlowUp,
            _ => ExitStatus::ConfigError,
        }
    }

    /// Maps a TOML error to a positioned parse error, or to a validation
    /// error naming the key when a field is unknown.
    pub(crate) fn from_toml(src: &str, err: &toml::de::Error) -> Self {
        let message = err.message().to_string();
        if let Some(rest) = message.strip_prefix("unknown field `") {
            if let Some(end) = rest.find('`') {
                return Self::validation(&rest[..end], message.clone());
            }
        }
        let (line, column) = err.span().map_or((1, 1), |s| line_col(src, s.start));
        Self::Parse { line, column, message }
    }
}

/// One-based line and column of byte offset `at`.
fn line_col(src: &str, at: usize) -> (usize, usize) {
    let at = at.min(src.len());
    let before = &src[..at];
    let line = before.matches('\n').count() + 1;
    let column = before.rfind('\n').map_or(at, |p| at - p - 1) + 1;
    (line, column)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn positions_are_one_based() {
        assert_eq!(line_col("ab\ncd", 0), (1, 1));
        assert_eq!(line_col("ab\ncd", 4), (2, 2));
    }
}

use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    /// A structurally invalid configuration value. `field` names the offending key.
    #[error("configuration error in `{field}`: {message}")]
    Config { field: String, message: String },

    #[error("invalid argument: {0}")]
    Argument(String),

    /// Text input that failed to parse. `line` is 1-based; 0 means "whole input".
    #[error("parse error at line {line}: {message}")]
    Parse { line: usize, message: String },

    #[error("training diverged at epoch {epoch}: {message}")]
    Training { epoch: usize, message: String },

    #[error("calibration error in layer {layer}: {message}")]
    Calibration { layer: usize, message: String },

    #[error("value out of range: {0}")]
    Range(String),

    #[error("degenerate range: {0}")]
    Degenerate(String),

    #[error("design does not fit target `{target}`: {}", violations.join("; "))]
    Fit {
        target: String,
        violations: Vec<String>,
    },

    #[error("unknown target `{0}`")]
    UnknownTarget(String),

    #[error("clock {clock_hz} Hz exceeds {target} maximum of {max_hz} Hz")]
    Clock {
        target: String,
        clock_hz: f64,
        max_hz: f64,
    },

    #[error("{}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn config(field: impl Into<String>, message: impl Into<String>) -> Self {
        Error::Config {
            field: field.into(),
            message: message.into(),
        }
    }

    pub(crate) fn parse(line: usize, message: impl Into<String>) -> Self {
        Error::Parse {
            line,
            message: message.into(),
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}

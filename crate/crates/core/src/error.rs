use std::path::PathBuf;

use thiserror::Error;

use crate::optim::FitReport;

/// Every failure the engine can report. Variants are grouped by category so
/// front ends can map them onto stable exit codes.
#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("contract violated: {0}")]
    Contract(String),

    #[error("integration diverged at step {step}: non-finite {quantity}")]
    Diverged { step: usize, quantity: &'static str },

    #[error("optimization diverged at iteration {iteration}")]
    FitDiverged {
        iteration: usize,
        report: Box<FitReport>,
    },

    #[error("i/o error on {}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("unsupported format for {}: {reason}", path.display())]
    UnsupportedFormat { path: PathBuf, reason: String },

    #[error("{}: expected a single grayscale channel, found {found}", path.display())]
    Channels { path: PathBuf, found: String },

    #[error("malformed file {}: {reason}", path.display())]
    Malformed { path: PathBuf, reason: String },
}

impl Error {
    /// Short machine-readable category name.
    pub fn category(&self) -> &'static str {
        match self {
            Error::Shape(_) => "shape",
            Error::Config(_) => "config",
            Error::Contract(_) => "contract",
            Error::Diverged { .. } | Error::FitDiverged { .. } => "diverged",
            Error::Io { .. } => "io",
            Error::UnsupportedFormat { .. } | Error::Channels { .. } | Error::Malformed { .. } => {
                "format"
            }
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn malformed(path: impl Into<PathBuf>, reason: impl Into<String>) -> Self {
        Error::Malformed {
            path: path.into(),
            reason: reason.into(),
        }
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

use std::path::{Path, PathBuf};

pub type Result<T, E = Error> = std::result::Result<T, E>;

/// Error categories surfaced by the command-line tool as distinct exit codes.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ErrorCategory {
    Config,
    Shape,
    Numeric,
    Storage,
    Leakage,
}

impl ErrorCategory {
    pub fn exit_code(self) -> i32 {
        match self {
            ErrorCategory::Config => 2,
            ErrorCategory::Shape => 3,
            ErrorCategory::Numeric => 4,
            ErrorCategory::Storage => 5,
            ErrorCategory::Leakage => 6,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            ErrorCategory::Config => "config",
            ErrorCategory::Shape => "shape",
            ErrorCategory::Numeric => "numeric",
            ErrorCategory::Storage => "storage",
            ErrorCategory::Leakage => "leakage",
        }
    }
}

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("configuration error: {0}")]
    Config(String),

    #[error("shape error: {0}")]
    Shape(String),

    #[error("non-finite values in {layer}")]
    Numeric { layer: String },

    #[error("numeric divergence during {stage} at step {step}")]
    Divergence { stage: &'static str, step: usize },

    #[error("degenerate reverse step at t={t}: 1 - alpha_bar is zero")]
    DegenerateStep { t: usize },

    #[error("parse error in {what}: {detail}")]
    Parse { what: String, detail: String },

    #[error("storage error at {}: {source}", path.display())]
    Storage {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("image error at {}: {detail}", path.display())]
    Image { path: PathBuf, detail: String },

    #[error("train/test leakage: {0}")]
    Leakage(String),
}

impl Error {
    pub fn category(&self) -> ErrorCategory {
        match self {
            Error::InvalidArgument(_) | Error::Config(_) => ErrorCategory::Config,
            Error::Shape(_) => ErrorCategory::Shape,
            Error::Numeric { .. } | Error::Divergence { .. } | Error::DegenerateStep { .. } => {
                ErrorCategory::Numeric
            }
            Error::Parse { .. } | Error::Storage { .. } | Error::Image { .. } => {
                ErrorCategory::Storage
            }
            Error::Leakage(_) => ErrorCategory::Leakage,
        }
    }

    pub(crate) fn storage(path: impl AsRef<Path>, source: std::io::Error) -> Self {
        Error::Storage {
            path: path.as_ref().to_path_buf(),
            source,
        }
    }

    pub(crate) fn parse(what: impl Into<String>, detail: impl ToString) -> Self {
        Error::Parse {
            what: what.into(),
            detail: detail.to_string(),
        }
    }
}

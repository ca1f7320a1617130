use std::path::PathBuf;

use thiserror::Error;

/// Everything that can go wrong in the pipeline.
#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension error in {op}: {lhs:?} vs {rhs:?}")]
    Shape {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },

    #[error("invalid parameter: {0}")]
    Param(String),

    #[error("format error at byte offset {offset}: {msg}")]
    Format { offset: u64, msg: String },

    #[error("config mismatch: {0}")]
    ConfigMismatch(String),

    #[error("input error in {path}: {msg}")]
    Input { path: PathBuf, msg: String },

    #[error("config error: {0}")]
    Config(String),

    #[error("undefined metric: {0}")]
    UndefinedMetric(String),

    #[error("training aborted: {0}")]
    Training(String),

    #[error("gradient check failed for `{tensor}`: max relative error {error:.3e} > {tolerance:.1e}")]
    GradCheck {
        tensor: String,
        error: f64,
        tolerance: f64,
    },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

/// Coarse error categories, used for process exit codes and the
/// machine-readable tag printed by the CLI.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Category {
    Runtime,
    Input,
    Config,
}

impl Category {
    pub fn exit_code(self) -> i32 {
        match self {
            Category::Runtime => 1,
            Category::Input => 2,
            Category::Config => 3,
        }
    }

    pub fn tag(self) -> &'static str {
        match self {
            Category::Runtime => "runtime",
            Category::Input => "input",
            Category::Config => "config",
        }
    }
}

impl Error {
    pub fn category(&self) -> Category {
        match self {
            Error::Format { .. } | Error::Input { .. } | Error::Io(_) | Error::Json(_) => {
                Category::Input
            }
            Error::ConfigMismatch(_) | Error::Config(_) | Error::Param(_) => Category::Config,
            Error::Shape { .. }
            | Error::UndefinedMetric(_)
            | Error::Training(_)
            | Error::GradCheck { .. } => Category::Runtime,
        }
    }

    pub(crate) fn input(path: impl Into<PathBuf>, msg: impl Into<String>) -> Self {
        Error::Input {
            path: path.into(),
            msg: msg.into(),
        }
    }

    pub(crate) fn format(offset: u64, msg: impl Into<String>) -> Self {
        Error::Format {
            offset,
            msg: msg.into(),
        }
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

use std::path::PathBuf;

use thiserror::Error;

use crate::config::Issue;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("cannot parse config {path}: {message}")]
    Parse { path: PathBuf, message: String },

    #[error("invalid config: {}", format_issues(.0))]
    Validation(Vec<Issue>),

    #[error("shape error: {0}")]
    Shape(String),

    #[error("label {label} out of range for {classes} classes")]
    Label { label: usize, classes: usize },

    #[error("scaled width {scaled} (from {width}) is below the channel multiple {multiple}")]
    TooNarrow { width: usize, scaled: usize, multiple: usize },

    #[error("input {height}x{width} too small for {stages} stride-2 stages")]
    InputTooSmall { height: usize, width: usize, stages: usize },

    #[error("reconciliation link {source_task}->{target_task} layer {source_layer}->{target_layer}: {message}")]
    Link {
        source_task: String,
        target_task: String,
        source_layer: usize,
        target_layer: usize,
        message: String,
    },

    #[error("non-finite loss at step {step} (task {task}, source {source_id})")]
    NonFinite { step: usize, task: String, source_id: String },

    #[error("source {0} is empty")]
    EmptySource(String),

    #[error("missing input: {0}")]
    MissingTask(String),

    #[error("invalid argument: {0}")]
    Invalid(String),

    #[error("checkpoint {path}: {message}")]
    Checkpoint { path: PathBuf, message: String },

    #[error("checkpoint was written for config {found}, current config is {expected}; pass --force to override")]
    ConfigHashMismatch { expected: String, found: String },

    #[error("I/O error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io { path: path.into(), source }
    }

    /// Process exit status for the command-line front end.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Parse { .. }
            | Error::Validation(_)
            | Error::Invalid(_)
            | Error::TooNarrow { .. }
            | Error::ConfigHashMismatch { .. } => 1,
            Error::Io { .. } | Error::Checkpoint { .. } => 3,
            _ => 2,
        }
    }
}

fn format_issues(issues: &[Issue]) -> String {
    issues.iter().map(|i| i.to_string()).collect::<Vec<_>>().join("; ")
}

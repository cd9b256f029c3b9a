//! Configuration, dispatch and artifact writing for the `divopt` binary.

pub mod config;
pub mod output;
pub mod run;

use std::path::PathBuf;

use divopt::closed_form::ClosedFormError;
use divopt::extensions::ExtensionError;
use divopt::grid::GridError;
use divopt::mc::McError;
use divopt::model::ModelError;
use divopt::solver::SolverError;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("cannot read `{}`: {source}", path.display())]
    Io { path: PathBuf, source: std::io::Error },
    #[error("cannot write `{}`: {source}", path.display())]
    Write { path: PathBuf, source: std::io::Error },
    #[error("malformed config `{}`: {message}", path.display())]
    Parse { path: PathBuf, message: String },
    #[error("config field `{field}`: {reason}")]
    Config { field: String, reason: String },
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error("config section `grid`: {0}")]
    Grid(#[from] GridError),
    #[error("solver: {0}")]
    Solver(#[from] SolverError),
    #[error("extension: {0}")]
    Extension(#[from] ExtensionError),
    #[error("closed form: {0}")]
    ClosedForm(#[from] ClosedFormError),
    #[error("monte carlo (config section `mc`): {0}")]
    Mc(#[from] McError),
}

impl CliError {
    pub fn config(field: impl Into<String>, reason: impl Into<String>) -> Self {
        Self::Config { field: field.into(), reason: reason.into() }
    }
}

/// Process exit status of a run.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Status {
    Converged,
    MaxIter,
    Failed,
}

impl Status {
    pub fn code(self) -> i32 {
        match self {
            Self::Converged => 0,
            Self::MaxIter => 2,
            Self::Failed => 1,
        }
    }

    /// The worse of two outcomes.
    pub fn merge(self, other: Self) -> Self {
        std::cmp::max_by_key(self, other, |s| match s {
            Self::Converged => 0,
            Self::MaxIter => 1,
            Self::Failed => 2,
        })
    }
}

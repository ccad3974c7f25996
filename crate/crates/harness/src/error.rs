use std::path::PathBuf;

use iie_core::annotation::FormError;
use iie_core::eval::EvalError;
use iie_core::gateway::{ReplayError, TemplateError};
use iie_core::nli::NliError;
use iie_core::pipeline::InputError;
use iie_core::verbalizer::ConfigError;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum HarnessError {
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("{path}: {source}")]
    Json { path: PathBuf, source: serde_json::Error },
    #[error(transparent)]
    Input(#[from] InputError),
    #[error(transparent)]
    Replay(#[from] ReplayError),
    #[error(transparent)]
    Template(#[from] TemplateError),
    #[error(transparent)]
    Form(#[from] FormError),
    #[error(transparent)]
    Eval(#[from] EvalError),
    #[error("{path}: {source}")]
    Ingest { path: PathBuf, source: EvalError },
    #[error(transparent)]
    Nli(#[from] NliError),
    #[error(transparent)]
    Verbalizer(#[from] ConfigError),
    #[error("HTTP client: {0}")]
    Client(String),
    #[error("{0}")]
    Usage(String),
    #[error("{failed} of {total} sentence runs failed; partial transcripts written")]
    RunsFailed { failed: usize, total: usize },
}

pub type Result<T> = std::result::Result<T, HarnessError>;

pub(crate) fn io_err(path: impl Into<PathBuf>) -> impl FnOnce(std::io::Error) -> HarnessError {
    let path = path.into();
    move |source| HarnessError::Io { path, source }
}

pub(crate) fn json_err(path: impl Into<PathBuf>) -> impl FnOnce(serde_json::Error) -> HarnessError {
    let path = path.into();
    move |source| HarnessError::Json { path, source }
}

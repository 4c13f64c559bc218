use std::fmt;

use ctxsel_core::{AnalysisError, BackendError, CorpusError, ScoringError, SelectionError};

/// A failed command, classified by exit status.
#[derive(Debug)]
pub enum CliError {
    Config(String),
    Data(String),
    Backend(String),
    /// Stopped early; rerunning with `--resume` continues from the cache.
    Incomplete(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) => 2,
            CliError::Data(_) => 3,
            CliError::Backend(_) => 4,
            CliError::Incomplete(_) => 5,
        }
    }

    pub fn io(path: &std::path::Path, err: std::io::Error) -> Self {
        CliError::Data(format!("{}: {err}", path.display()))
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CliError::Config(m) => write!(f, "configuration error: {m}"),
            CliError::Data(m) => write!(f, "data error: {m}"),
            CliError::Backend(m) => write!(f, "backend error: {m}"),
            CliError::Incomplete(m) => write!(f, "incomplete run: {m}"),
        }
    }
}

impl std::error::Error for CliError {}

impl From<BackendError> for CliError {
    fn from(e: BackendError) -> Self {
        match e {
            BackendError::Config(_) | BackendError::InvalidParams(_) => CliError::Config(e.to_string()),
            BackendError::BudgetExhausted(_) => CliError::Incomplete(e.to_string()),
            _ => CliError::Backend(e.to_string()),
        }
    }
}

impl From<CorpusError> for CliError {
    fn from(e: CorpusError) -> Self {
        CliError::Data(e.to_string())
    }
}

impl From<ScoringError> for CliError {
    fn from(e: ScoringError) -> Self {
        match e {
            ScoringError::Incomplete { .. } => CliError::Incomplete(e.to_string()),
            ScoringError::Config(_) => CliError::Config(e.to_string()),
            ScoringError::Backend(b) => b.into(),
            _ => CliError::Data(e.to_string()),
        }
    }
}

impl From<SelectionError> for CliError {
    fn from(e: SelectionError) -> Self {
        match e {
            SelectionError::InvalidPercent(_) | SelectionError::UnknownMethod(_) => CliError::Config(e.to_string()),
            _ => CliError::Data(e.to_string()),
        }
    }
}

impl From<AnalysisError> for CliError {
    fn from(e: AnalysisError) -> Self {
        match e {
            AnalysisError::Backend(b) => b.into(),
            AnalysisError::Scoring(s) => s.into(),
            _ => CliError::Data(e.to_string()),
        }
    }
}

impl From<serde_json::Error> for CliError {
    fn from(e: serde_json::Error) -> Self {
        CliError::Data(e.to_string())
    }
}

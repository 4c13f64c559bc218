use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum CorpusError {
    #[error("cannot read or write {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("parse error at byte {offset}{}: {reason}", index.map(|i| format!(" (record {i})")).unwrap_or_default())]
    Parse {
        offset: usize,
        index: Option<usize>,
        reason: String,
    },
    #[error("invalid record{}: {reason}", index.map(|i| format!(" {i}")).unwrap_or_default())]
    InvalidRecord { index: Option<usize>, reason: String },
    #[error("duplicate ids: {}", .0.join(", "))]
    DuplicateIds(Vec<String>),
    #[error("assessment source {0} is empty")]
    EmptySource(String),
    #[error("no assessment sources declared")]
    NoSources,
    #[error("assessment quota shortfall: {0}")]
    QuotaShortfall(String),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl CorpusError {
    pub(crate) fn at_index(self, index: usize) -> Self {
        match self {
            CorpusError::InvalidRecord { reason, .. } => CorpusError::InvalidRecord {
                index: Some(index),
                reason,
            },
            other => other,
        }
    }
}

#[derive(Debug, Error)]
pub enum BackendError {
    #[error("invalid backend configuration: {0}")]
    Config(String),
    #[error("continuation must not be empty")]
    EmptyContinuation,
    #[error("token {0:?} is not in the vocabulary")]
    UnknownToken(String),
    #[error("invalid language-model parameters: {0}")]
    InvalidParams(String),
    #[error("request failed after {attempts} attempt(s): {}", log.join("; "))]
    Transport { attempts: usize, log: Vec<String> },
    #[error("request rejected with status {status}: {body}")]
    Rejected { status: u16, body: String },
    #[error("tokenization mismatch: {0}")]
    TokenizationMismatch(String),
    #[error(
        "backend does not echo its tokenization; set the scoring length unit to \"chars\" \
         to match control lengths in characters instead"
    )]
    TokenizationUnavailable,
    #[error("malformed backend response: {0}")]
    Malformed(String),
    #[error("call budget of {0} backend calls exhausted")]
    BudgetExhausted(u64),
    #[error("cache file {path}: {source}")]
    Cache {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl BackendError {
    /// Only transport-class failures are worth another attempt.
    pub fn is_retryable(&self) -> bool {
        matches!(self, BackendError::Transport { .. })
    }
}

#[derive(Debug, Error)]
pub enum ScoringError {
    #[error("perplexity of an empty log-probability sequence is undefined")]
    EmptyLogprobs,
    #[error("non-finite or non-positive input: {0}")]
    NonFinite(String),
    #[error("global score needs at least one task score")]
    NoTaskScores,
    #[error("invalid scoring configuration: {0}")]
    Config(String),
    #[error("prompt for sample {sample_id} and item {assessment_id} is {tokens} tokens, over the context limit of {limit}")]
    ContextOverflow {
        sample_id: String,
        assessment_id: String,
        tokens: usize,
        limit: usize,
    },
    #[error("candidate pool overlaps the assessment set ({0} collision(s)); refusing to score")]
    NotDisjoint(usize),
    #[error("scoring stopped with {completed} of {total} probes complete: {cause}")]
    Incomplete {
        completed: usize,
        total: usize,
        #[source]
        cause: BackendError,
    },
    #[error(transparent)]
    Backend(#[from] BackendError),
    #[error("checkpoint {path}: {source}")]
    Checkpoint {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error(transparent)]
    Csv(#[from] csv::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

#[derive(Debug, Error)]
pub enum SelectionError {
    #[error("K must lie in (0, 100], got {0}")]
    InvalidPercent(f64),
    #[error("unknown selection method {0:?}")]
    UnknownMethod(String),
    #[error("labels contain a single class; selector training needs both")]
    SingleClass,
    #[error("not enough labeled samples to train: {0}")]
    TooFewSamples(usize),
    #[error("unknown sample id {0}")]
    UnknownId(String),
    #[error("missing perplexity for sample {0}")]
    MissingPpl(String),
    #[error("unsupported selector model version {0}")]
    ModelVersion(u32),
    #[error("malformed selector model: {0}")]
    MalformedModel(String),
    #[error("i/o on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

#[derive(Debug, Error)]
pub enum AnalysisError {
    #[error("invalid pairwise label {0:?} (expected win, tie or lose)")]
    InvalidLabel(String),
    #[error("total comparisons must be positive")]
    NoComparisons,
    #[error("wins ({wins}) plus losses ({losses}) exceed total ({total})")]
    CountsExceedTotal { wins: u64, losses: u64, total: u64 },
    #[error("empty group: {0}")]
    EmptyGroup(&'static str),
    #[error("non-finite perplexity ratio for sample {0}")]
    NonFinite(String),
    #[error(transparent)]
    Backend(#[from] BackendError),
    #[error(transparent)]
    Scoring(#[from] ScoringError),
}

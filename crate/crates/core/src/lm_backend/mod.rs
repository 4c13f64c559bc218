//! Log-probability oracles over (prompt, continuation) pairs.
//!
//! [`LanguageModel`] is the pluggable backend: either the built-in
//! [`CacheLm`] or a [`RemoteLm`] speaking the completions-with-echoed-logprobs
//! protocol. A [`Session`] wraps a backend with the persistent [`ScoreCache`]
//! and exact call accounting.

mod cache;
mod cache_lm;
mod remote;
mod session;

use std::path::PathBuf;
use std::time::Duration;

use serde::{Deserialize, Serialize};

pub use cache::{ScoreCache, ScoreCacheKey};
pub use cache_lm::{CacheLm, CacheLmParams, UNK};
pub use remote::{RemoteLm, API_KEY_ENV};
pub use session::{CallAccounting, Session};

use crate::error::BackendError;

/// Per-token natural-log probabilities of a continuation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TokenLogprobs {
    pub tokens: Vec<String>,
    pub logprobs: Vec<f64>,
}

impl TokenLogprobs {
    pub fn new(tokens: Vec<String>, logprobs: Vec<f64>) -> Result<Self, BackendError> {
        if tokens.len() != logprobs.len() {
            return Err(BackendError::Malformed(format!(
                "{} tokens but {} logprobs",
                tokens.len(),
                logprobs.len()
            )));
        }
        if tokens.is_empty() {
            return Err(BackendError::EmptyContinuation);
        }
        if let Some(lp) = logprobs.iter().find(|lp| lp.is_nan() || **lp > 0.0) {
            return Err(BackendError::Malformed(format!("log-probability {lp} is not <= 0")));
        }
        Ok(TokenLogprobs { tokens, logprobs })
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }
}

/// A source of conditional log-probabilities.
pub trait LanguageModel: Send + Sync {
    /// Opaque identity of the model weights; part of every cache key.
    fn model_id(&self) -> &str;

    fn tokenize(&self, text: &str) -> Result<Vec<String>, BackendError>;

    /// Log-probabilities of the continuation's tokens only, each conditioned
    /// on the prompt and the preceding continuation tokens.
    fn continuation_logprobs(&self, prompt: &str, continuation: &str) -> Result<TokenLogprobs, BackendError>;

    /// Tokens that random control sequences are drawn from.
    fn control_vocabulary(&self) -> Result<&[String], BackendError>;

    /// Inverse of [`LanguageModel::tokenize`] for control sequences.
    fn detokenize(&self, tokens: &[String]) -> String;

    /// Whether tokenization runs without contacting a server.
    fn is_local(&self) -> bool {
        false
    }

    /// Maximum prompt plus continuation length in tokens, when known.
    fn context_limit(&self) -> Option<usize> {
        None
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum BackendKind {
    Remote,
    CacheLm,
}

impl std::str::FromStr for BackendKind {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "remote" => Ok(BackendKind::Remote),
            "cache-lm" => Ok(BackendKind::CacheLm),
            other => Err(format!("unknown backend {other:?} (expected remote or cache-lm)")),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BackendConfig {
    pub kind: BackendKind,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub endpoint: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub model_id: Option<String>,
    #[serde(default = "default_concurrency")]
    pub max_concurrency: usize,
    #[serde(default = "default_retry_limit")]
    pub retry_limit: u32,
    #[serde(default = "default_timeout_secs")]
    pub timeout_secs: f64,
    /// Initial backoff delay; doubles per attempt, with jitter.
    #[serde(default = "default_backoff_ms")]
    pub backoff_ms: u64,
    /// `logprobs` field sent with remote requests.
    #[serde(default)]
    pub top_logprobs: u32,
    /// Cache-lm mixing weight.
    #[serde(default = "default_lambda")]
    pub lambda: f64,
    /// Cache-lm parameters as JSON; fitted on the corpus when absent.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub params_path: Option<PathBuf>,
    /// One token per line; remote random controls are drawn from it.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub control_vocab_path: Option<PathBuf>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub context_limit: Option<usize>,
}

fn default_concurrency() -> usize {
    4
}
fn default_retry_limit() -> u32 {
    3
}
fn default_timeout_secs() -> f64 {
    60.0
}
fn default_backoff_ms() -> u64 {
    250
}
fn default_lambda() -> f64 {
    0.5
}

impl BackendConfig {
    pub fn cache_lm() -> Self {
        BackendConfig {
            kind: BackendKind::CacheLm,
            endpoint: None,
            model_id: None,
            max_concurrency: default_concurrency(),
            retry_limit: default_retry_limit(),
            timeout_secs: default_timeout_secs(),
            backoff_ms: default_backoff_ms(),
            top_logprobs: 0,
            lambda: default_lambda(),
            params_path: None,
            control_vocab_path: None,
            context_limit: None,
        }
    }

    pub fn remote(endpoint: impl Into<String>, model_id: impl Into<String>) -> Self {
        BackendConfig {
            kind: BackendKind::Remote,
            endpoint: Some(endpoint.into()),
            model_id: Some(model_id.into()),
            ..Self::cache_lm()
        }
    }

    pub fn timeout(&self) -> Duration {
        Duration::from_secs_f64(self.timeout_secs)
    }

    pub fn validate(&self) -> Result<(), BackendError> {
        if self.max_concurrency == 0 {
            return Err(BackendError::Config("max_concurrency must be at least 1".into()));
        }
        if !(self.timeout_secs.is_finite() && self.timeout_secs > 0.0) {
            return Err(BackendError::Config("timeout must be positive".into()));
        }
        match (self.kind, &self.endpoint) {
            (BackendKind::Remote, None) => Err(BackendError::Config("remote backend needs an endpoint".into())),
            (BackendKind::CacheLm, Some(_)) => {
                Err(BackendError::Config("endpoint is only valid for the remote backend".into()))
            }
            (BackendKind::Remote, Some(_)) if self.model_id.is_none() => {
                Err(BackendError::Config("remote backend needs a model_id".into()))
            }
            _ => Ok(()),
        }
    }
}

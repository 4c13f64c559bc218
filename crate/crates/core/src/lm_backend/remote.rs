//! Client for completions endpoints that echo prompt log-probabilities.
//!
//! The prompt and continuation are submitted together with `max_tokens: 0`
//! and `echo: true`; the server returns every token of the combined text with
//! its log-probability and character offset. Continuation tokens are the ones
//! starting at or after the prompt's character length, and their text must
//! reassemble the continuation exactly.

use std::fs;
use std::thread;
use std::time::Duration;

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::{BackendConfig, BackendKind, LanguageModel, TokenLogprobs};
use crate::error::BackendError;

/// Environment variable holding the bearer token for remote requests.
pub const API_KEY_ENV: &str = "CTXSEL_API_KEY";

#[derive(Debug, Serialize)]
struct CompletionRequest<'a> {
    model: &'a str,
    prompt: &'a str,
    max_tokens: u32,
    echo: bool,
    logprobs: u32,
}

#[derive(Debug, Deserialize)]
struct CompletionResponse {
    choices: Vec<Choice>,
}

#[derive(Debug, Deserialize)]
struct Choice {
    #[serde(default)]
    logprobs: Option<EchoedLogprobs>,
}

#[derive(Debug, Deserialize)]
struct EchoedLogprobs {
    #[serde(default)]
    tokens: Vec<String>,
    #[serde(default)]
    token_logprobs: Vec<Option<f64>>,
    #[serde(default)]
    text_offset: Vec<usize>,
}

#[derive(Debug)]
pub struct RemoteLm {
    client: reqwest::blocking::Client,
    endpoint: String,
    model_id: String,
    api_key: Option<String>,
    retry_limit: u32,
    backoff: Duration,
    top_logprobs: u32,
    control_vocab: Option<Vec<String>>,
    context_limit: Option<usize>,
}

impl RemoteLm {
    pub fn new(config: &BackendConfig) -> Result<Self, BackendError> {
        config.validate()?;
        if config.kind != BackendKind::Remote {
            return Err(BackendError::Config("RemoteLm needs a remote backend config".into()));
        }
        let client = reqwest::blocking::Client::builder()
            .timeout(config.timeout())
            .build()
            .map_err(|e| BackendError::Config(e.to_string()))?;
        let control_vocab = match &config.control_vocab_path {
            Some(path) => {
                let text = fs::read_to_string(path).map_err(|source| BackendError::Cache {
                    path: path.clone(),
                    source,
                })?;
                let vocab: Vec<String> = text.lines().filter(|l| !l.is_empty()).map(str::to_string).collect();
                if vocab.is_empty() {
                    return Err(BackendError::Config(format!("control vocabulary {} is empty", path.display())));
                }
                Some(vocab)
            }
            None => None,
        };
        Ok(RemoteLm {
            client,
            endpoint: config.endpoint.clone().unwrap_or_default(),
            model_id: config.model_id.clone().unwrap_or_default(),
            api_key: std::env::var(API_KEY_ENV).ok().filter(|k| !k.is_empty()),
            retry_limit: config.retry_limit,
            backoff: Duration::from_millis(config.backoff_ms),
            top_logprobs: config.top_logprobs,
            control_vocab,
            context_limit: config.context_limit,
        })
    }

    pub fn with_api_key(mut self, key: Option<String>) -> Self {
        self.api_key = key;
        self
    }

    fn backoff_delay(&self, attempt: u32) -> Duration {
        let base = self.backoff.saturating_mul(1u32 << attempt.min(16));
        let jitter = rand::thread_rng().gen_range(0.0..0.5);
        base.mul_f64(1.0 + jitter).min(Duration::from_secs(30))
    }

    fn echo(&self, text: &str) -> Result<EchoedLogprobs, BackendError> {
        let request = CompletionRequest {
            model: &self.model_id,
            prompt: text,
            max_tokens: 0,
            echo: true,
            logprobs: self.top_logprobs,
        };
        let mut log = Vec::new();
        let attempts = self.retry_limit as usize + 1;
        for attempt in 0..attempts {
            if attempt > 0 {
                thread::sleep(self.backoff_delay(attempt as u32 - 1));
            }
            let mut builder = self.client.post(&self.endpoint).json(&request);
            if let Some(key) = &self.api_key {
                builder = builder.bearer_auth(key);
            }
            let response = match builder.send() {
                Ok(r) => r,
                Err(e) => {
                    log.push(format!("attempt {}: {e}", attempt + 1));
                    continue;
                }
            };
            let status = response.status();
            if status.is_server_error() || status.as_u16() == 429 {
                log.push(format!("attempt {}: HTTP {status}", attempt + 1));
                continue;
            }
            let body = response.text().map_err(|e| BackendError::Malformed(e.to_string()));
            if !status.is_success() {
                return Err(BackendError::Rejected {
                    status: status.as_u16(),
                    body: body.unwrap_or_default(),
                });
            }
            let parsed: CompletionResponse =
                serde_json::from_str(&body?).map_err(|e| BackendError::Malformed(e.to_string()))?;
            let choice = parsed
                .choices
                .into_iter()
                .next()
                .ok_or_else(|| BackendError::Malformed("response has no choices".into()))?;
            return choice.logprobs.ok_or(BackendError::TokenizationUnavailable);
        }
        Err(BackendError::Transport { attempts, log })
    }
}

/// Picks the continuation's tokens out of an echoed prompt+continuation.
fn continuation_slice(
    echoed: EchoedLogprobs,
    prompt: &str,
    continuation: &str,
) -> Result<TokenLogprobs, BackendError> {
    let EchoedLogprobs {
        tokens,
        token_logprobs,
        text_offset,
    } = echoed;
    if tokens.is_empty() {
        return Err(BackendError::TokenizationUnavailable);
    }
    if tokens.len() != token_logprobs.len() || tokens.len() != text_offset.len() {
        return Err(BackendError::Malformed(format!(
            "{} tokens, {} logprobs, {} offsets",
            tokens.len(),
            token_logprobs.len(),
            text_offset.len()
        )));
    }
    let boundary = prompt.chars().count();
    let start = text_offset.iter().position(|&o| o >= boundary).ok_or_else(|| {
        BackendError::TokenizationMismatch("no echoed token starts inside the continuation".into())
    })?;
    if start > 0 {
        let prev_end = text_offset[start - 1] + tokens[start - 1].chars().count();
        if prev_end > boundary {
            return Err(BackendError::TokenizationMismatch(format!(
                "token {:?} straddles the prompt/continuation boundary",
                tokens[start - 1]
            )));
        }
    }
    if text_offset[start] != boundary {
        return Err(BackendError::TokenizationMismatch(format!(
            "first continuation token starts at offset {}, expected {boundary}",
            text_offset[start]
        )));
    }
    let cont_tokens: Vec<String> = tokens[start..].to_vec();
    let joined: String = cont_tokens.concat();
    if joined != continuation {
        return Err(BackendError::TokenizationMismatch(format!(
            "echoed continuation {joined:?} differs from {continuation:?}"
        )));
    }
    let logprobs = token_logprobs[start..]
        .iter()
        .enumerate()
        .map(|(i, lp)| {
            lp.ok_or_else(|| BackendError::Malformed(format!("missing logprob for continuation token {i}")))
        })
        .collect::<Result<Vec<f64>, _>>()?;
    TokenLogprobs::new(cont_tokens, logprobs)
}

impl LanguageModel for RemoteLm {
    fn model_id(&self) -> &str {
        &self.model_id
    }

    fn tokenize(&self, text: &str) -> Result<Vec<String>, BackendError> {
        if text.is_empty() {
            return Ok(Vec::new());
        }
        let echoed = self.echo(text)?;
        if echoed.tokens.is_empty() {
            return Err(BackendError::TokenizationUnavailable);
        }
        Ok(echoed.tokens)
    }

    fn continuation_logprobs(&self, prompt: &str, continuation: &str) -> Result<TokenLogprobs, BackendError> {
        if continuation.is_empty() {
            return Err(BackendError::EmptyContinuation);
        }
        let full = format!("{prompt}{continuation}");
        let echoed = self.echo(&full)?;
        continuation_slice(echoed, prompt, continuation)
    }

    fn control_vocabulary(&self) -> Result<&[String], BackendError> {
        self.control_vocab.as_deref().ok_or_else(|| {
            BackendError::Config("remote backend needs control_vocab_path to draw random controls".into())
        })
    }

    fn detokenize(&self, tokens: &[String]) -> String {
        tokens.concat()
    }

    fn context_limit(&self) -> Option<usize> {
        self.context_limit
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn echoed(tokens: &[&str], lps: &[Option<f64>]) -> EchoedLogprobs {
        let mut offsets = Vec::new();
        let mut at = 0;
        for t in tokens {
            offsets.push(at);
            at += t.chars().count();
        }
        EchoedLogprobs {
            tokens: tokens.iter().map(|s| s.to_string()).collect(),
            token_logprobs: lps.to_vec(),
            text_offset: offsets,
        }
    }

    #[test]
    fn slices_continuation() {
        let e = echoed(&["Hi", ",", " there", " you"], &[None, Some(-1.0), Some(-2.0), Some(-0.5)]);
        let lp = continuation_slice(e, "Hi,", " there you").unwrap();
        assert_eq!(lp.tokens, vec![" there", " you"]);
        assert_eq!(lp.logprobs, vec![-2.0, -0.5]);
    }

    #[test]
    fn straddling_token_is_mismatch() {
        let e = echoed(&["Hi", ", there"], &[None, Some(-1.0)]);
        assert!(matches!(
            continuation_slice(e, "Hi,", " there"),
            Err(BackendError::TokenizationMismatch(_))
        ));
    }

    #[test]
    fn altered_text_is_mismatch() {
        let e = echoed(&["Hi", " there"], &[None, Some(-1.0)]);
        assert!(matches!(
            continuation_slice(e, "Hi", " their"),
            Err(BackendError::TokenizationMismatch(_))
        ));
    }

    #[test]
    fn null_continuation_logprob_is_malformed() {
        let e = echoed(&["Hi", " there"], &[None, None]);
        assert!(matches!(
            continuation_slice(e, "Hi", " there"),
            Err(BackendError::Malformed(_))
        ));
    }

    #[test]
    fn non_ascii_offsets_are_characters() {
        let e = echoed(&["héllo", " wörld"], &[None, Some(-3.0)]);
        let lp = continuation_slice(e, "héllo", " wörld").unwrap();
        assert_eq!(lp.logprobs, vec![-3.0]);
    }
}

use std::collections::HashMap;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::{Arc, RwLock};

use serde::{Deserialize, Serialize};

use super::{LanguageModel, ScoreCache, ScoreCacheKey, TokenLogprobs};
use crate::error::BackendError;

/// Exact counters for one session. Cache hits never count as backend calls.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct CallAccounting {
    pub backend_calls: u64,
    pub prompt_tokens: u64,
    pub continuation_tokens: u64,
    pub cache_hits: u64,
    /// Remote tokenization requests (always 0 for local backends).
    pub tokenize_calls: u64,
}

impl CallAccounting {
    pub fn queries(&self) -> u64 {
        self.backend_calls + self.cache_hits
    }
}

#[derive(Debug, Default)]
struct Counters {
    backend_calls: AtomicU64,
    prompt_tokens: AtomicU64,
    continuation_tokens: AtomicU64,
    cache_hits: AtomicU64,
    tokenize_calls: AtomicU64,
    reserved: AtomicU64,
}

/// A backend plus its cache and accounting.
pub struct Session {
    model: Arc<dyn LanguageModel>,
    cache: ScoreCache,
    counters: Counters,
    budget: Option<u64>,
    tokenized: RwLock<HashMap<String, Arc<Vec<String>>>>,
}

impl Session {
    pub fn new(model: Arc<dyn LanguageModel>, cache: ScoreCache) -> Self {
        Session {
            model,
            cache,
            counters: Counters::default(),
            budget: None,
            tokenized: RwLock::new(HashMap::new()),
        }
    }

    pub fn in_memory(model: Arc<dyn LanguageModel>) -> Self {
        Self::new(model, ScoreCache::in_memory())
    }

    /// Caps the number of uncached backend calls; the call past the cap
    /// fails with [`BackendError::BudgetExhausted`].
    pub fn with_call_budget(mut self, budget: Option<u64>) -> Self {
        self.budget = budget;
        self
    }

    pub fn model(&self) -> &dyn LanguageModel {
        self.model.as_ref()
    }

    pub fn model_id(&self) -> &str {
        self.model.model_id()
    }

    pub fn cache(&self) -> &ScoreCache {
        &self.cache
    }

    pub fn accounting(&self) -> CallAccounting {
        let c = &self.counters;
        CallAccounting {
            backend_calls: c.backend_calls.load(Ordering::SeqCst),
            prompt_tokens: c.prompt_tokens.load(Ordering::SeqCst),
            continuation_tokens: c.continuation_tokens.load(Ordering::SeqCst),
            cache_hits: c.cache_hits.load(Ordering::SeqCst),
            tokenize_calls: c.tokenize_calls.load(Ordering::SeqCst),
        }
    }

    pub fn is_cached(&self, prompt: &str, continuation: &str) -> bool {
        self.cache
            .get(&ScoreCacheKey::new(self.model_id(), prompt, continuation))
            .is_some()
    }

    pub fn continuation_logprobs(&self, prompt: &str, continuation: &str) -> Result<TokenLogprobs, BackendError> {
        if continuation.trim().is_empty() {
            return Err(BackendError::EmptyContinuation);
        }
        let key = ScoreCacheKey::new(self.model_id(), prompt, continuation);
        let (value, hit) = self.cache.get_or_compute(&key, || {
            self.reserve_call()?;
            let value = self.model.continuation_logprobs(prompt, continuation)?;
            let prompt_tokens = if self.model.is_local() {
                self.model.tokenize(prompt)?.len() as u64
            } else {
                0
            };
            let c = &self.counters;
            c.backend_calls.fetch_add(1, Ordering::SeqCst);
            c.prompt_tokens.fetch_add(prompt_tokens, Ordering::SeqCst);
            c.continuation_tokens.fetch_add(value.len() as u64, Ordering::SeqCst);
            Ok(value)
        })?;
        if hit {
            self.counters.cache_hits.fetch_add(1, Ordering::SeqCst);
        }
        Ok(value)
    }

    fn reserve_call(&self) -> Result<(), BackendError> {
        if let Some(budget) = self.budget {
            let n = self.counters.reserved.fetch_add(1, Ordering::SeqCst);
            if n >= budget {
                return Err(BackendError::BudgetExhausted(budget));
            }
        }
        Ok(())
    }

    /// Memoized tokenization. Remote tokenization counts as a tokenize call.
    pub fn tokenize(&self, text: &str) -> Result<Arc<Vec<String>>, BackendError> {
        if let Some(tokens) = self.tokenized.read().unwrap().get(text) {
            return Ok(tokens.clone());
        }
        let tokens = Arc::new(self.model.tokenize(text)?);
        if !self.model.is_local() {
            self.counters.tokenize_calls.fetch_add(1, Ordering::SeqCst);
        }
        self.tokenized
            .write()
            .unwrap()
            .insert(text.to_string(), tokens.clone());
        Ok(tokens)
    }
}

impl std::fmt::Debug for Session {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Session")
            .field("model_id", &self.model_id())
            .field("accounting", &self.accounting())
            .finish()
    }
}

//! Unigram-cache language model.
//!
//! A closed-vocabulary unigram distribution mixed with the empirical token
//! distribution of everything seen so far:
//!
//! ```text
//! p(t | h) = lambda * count(t in h) / |h| + (1 - lambda) * base(t)     (|h| > 0)
//! p(t | h) = base(t)                                                  (|h| = 0)
//! ```
//!
//! Tokens already present in the context get boosted, so in-context
//! demonstrations change the likelihood of a continuation. Text is split on
//! whitespace; tokens outside the vocabulary map to [`UNK`].

use std::collections::HashMap;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::{LanguageModel, TokenLogprobs};
use crate::error::BackendError;

pub const UNK: &str = "<unk>";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CacheLmParams {
    pub vocabulary: Vec<String>,
    pub base_unigram: Vec<f64>,
    pub lambda: f64,
}

impl CacheLmParams {
    pub fn new(vocabulary: Vec<String>, base_unigram: Vec<f64>, lambda: f64) -> Result<Self, BackendError> {
        let params = CacheLmParams {
            vocabulary,
            base_unigram,
            lambda,
        };
        params.validate()?;
        Ok(params)
    }

    pub fn uniform(vocabulary: Vec<String>, lambda: f64) -> Result<Self, BackendError> {
        let n = vocabulary.len();
        Self::new(vocabulary, vec![1.0 / n as f64; n], lambda)
    }

    /// Add-one smoothed unigram over the whitespace tokens of `texts`, with
    /// [`UNK`] appended as the last entry. Vocabulary is sorted.
    pub fn fit<'a>(texts: impl IntoIterator<Item = &'a str>, lambda: f64) -> Result<Self, BackendError> {
        let mut counts: HashMap<&str, u64> = HashMap::new();
        for text in texts {
            for tok in text.split_whitespace() {
                *counts.entry(tok).or_default() += 1;
            }
        }
        counts.remove(UNK);
        let mut vocab: Vec<&str> = counts.keys().copied().collect();
        vocab.sort_unstable();
        let total: u64 = counts.values().sum();
        let denom = (total + vocab.len() as u64 + 1) as f64;
        let mut probs: Vec<f64> = vocab.iter().map(|t| (counts[t] + 1) as f64 / denom).collect();
        probs.push(1.0 / denom);
        let mut vocabulary: Vec<String> = vocab.into_iter().map(str::to_string).collect();
        vocabulary.push(UNK.to_string());
        Self::new(vocabulary, probs, lambda)
    }

    fn validate(&self) -> Result<(), BackendError> {
        let bad = |msg: String| Err(BackendError::InvalidParams(msg));
        if self.vocabulary.is_empty() {
            return bad("empty vocabulary".into());
        }
        if self.vocabulary.len() != self.base_unigram.len() {
            return bad(format!(
                "{} vocabulary entries but {} probabilities",
                self.vocabulary.len(),
                self.base_unigram.len()
            ));
        }
        if !(0.0..1.0).contains(&self.lambda) {
            return bad(format!("lambda must lie in [0, 1), got {}", self.lambda));
        }
        if let Some(p) = self.base_unigram.iter().find(|p| !(p.is_finite() && **p > 0.0)) {
            return bad(format!("probability {p} is not strictly positive"));
        }
        let sum: f64 = self.base_unigram.iter().sum();
        if (sum - 1.0).abs() > 1e-12 {
            return bad(format!("probabilities sum to {sum}, not 1"));
        }
        let mut seen = std::collections::HashSet::new();
        if let Some(dup) = self.vocabulary.iter().find(|t| !seen.insert(t.as_str())) {
            return bad(format!("duplicate vocabulary entry {dup:?}"));
        }
        Ok(())
    }
}

/// Running token counts for a history.
#[derive(Debug, Clone, Default)]
struct History {
    counts: HashMap<usize, u64>,
    len: u64,
}

impl History {
    fn push(&mut self, id: usize) {
        *self.counts.entry(id).or_default() += 1;
        self.len += 1;
    }
}

#[derive(Debug, Clone)]
pub struct CacheLm {
    params: CacheLmParams,
    index: HashMap<String, usize>,
    unk: Option<usize>,
    model_id: String,
}

impl CacheLm {
    pub fn new(params: CacheLmParams) -> Result<Self, BackendError> {
        params.validate()?;
        let index: HashMap<String, usize> = params
            .vocabulary
            .iter()
            .enumerate()
            .map(|(i, t)| (t.clone(), i))
            .collect();
        let unk = index.get(UNK).copied();
        let model_id = format!("cache-lm:{}", params_digest(&params));
        Ok(CacheLm {
            params,
            index,
            unk,
            model_id,
        })
    }

    pub fn params(&self) -> &CacheLmParams {
        &self.params
    }

    fn token_id(&self, token: &str) -> Option<usize> {
        self.index.get(token).copied().or(self.unk)
    }

    fn ids(&self, text: &str) -> Result<Vec<usize>, BackendError> {
        text.split_whitespace()
            .map(|t| self.token_id(t).ok_or_else(|| BackendError::UnknownToken(t.to_string())))
            .collect()
    }

    fn prob_id(&self, history: &History, id: usize) -> f64 {
        let base = self.params.base_unigram[id];
        if history.len == 0 {
            return base;
        }
        let lambda = self.params.lambda;
        let cached = history.counts.get(&id).copied().unwrap_or(0) as f64 / history.len as f64;
        lambda * cached + (1.0 - lambda) * base
    }

    /// Probability of `token` after `history`. The token must be a vocabulary
    /// entry; history tokens outside the vocabulary count as [`UNK`].
    pub fn prob(&self, history: &[&str], token: &str) -> Result<f64, BackendError> {
        let id = *self
            .index
            .get(token)
            .ok_or_else(|| BackendError::UnknownToken(token.to_string()))?;
        let mut h = History::default();
        for t in history {
            let hid = self
                .token_id(t)
                .ok_or_else(|| BackendError::UnknownToken(t.to_string()))?;
            h.push(hid);
        }
        Ok(self.prob_id(&h, id))
    }
}

/// Stable digest of the parameters, used as the model identity.
fn params_digest(params: &CacheLmParams) -> String {
    let mut hasher = Sha256::new();
    hasher.update(params.lambda.to_bits().to_le_bytes());
    for (tok, p) in params.vocabulary.iter().zip(&params.base_unigram) {
        hasher.update((tok.len() as u64).to_le_bytes());
        hasher.update(tok.as_bytes());
        hasher.update(p.to_bits().to_le_bytes());
    }
    hex::encode(&hasher.finalize()[..8])
}

impl LanguageModel for CacheLm {
    fn model_id(&self) -> &str {
        &self.model_id
    }

    fn tokenize(&self, text: &str) -> Result<Vec<String>, BackendError> {
        text.split_whitespace()
            .map(|t| {
                if self.index.contains_key(t) {
                    Ok(t.to_string())
                } else if self.unk.is_some() {
                    Ok(UNK.to_string())
                } else {
                    Err(BackendError::UnknownToken(t.to_string()))
                }
            })
            .collect()
    }

    fn is_local(&self) -> bool {
        true
    }

    fn continuation_logprobs(&self, prompt: &str, continuation: &str) -> Result<TokenLogprobs, BackendError> {
        let cont = self.ids(continuation)?;
        if cont.is_empty() {
            return Err(BackendError::EmptyContinuation);
        }
        let mut history = History::default();
        for id in self.ids(prompt)? {
            history.push(id);
        }
        let mut tokens = Vec::with_capacity(cont.len());
        let mut logprobs = Vec::with_capacity(cont.len());
        for id in cont {
            logprobs.push(self.prob_id(&history, id).ln());
            tokens.push(self.params.vocabulary[id].clone());
            history.push(id);
        }
        TokenLogprobs::new(tokens, logprobs)
    }

    fn control_vocabulary(&self) -> Result<&[String], BackendError> {
        Ok(&self.params.vocabulary)
    }

    fn detokenize(&self, tokens: &[String]) -> String {
        tokens.join(" ")
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    fn abcd(lambda: f64) -> CacheLm {
        let vocab = ["a", "b", "c", "d"].iter().map(|s| s.to_string()).collect();
        CacheLm::new(CacheLmParams::uniform(vocab, lambda).unwrap()).unwrap()
    }

    #[test]
    fn empty_history_is_base() {
        let lm = abcd(0.5);
        assert_eq!(lm.prob(&[], "c").unwrap(), 0.25);
    }

    #[test]
    fn lambda_zero_is_base() {
        let lm = abcd(0.0);
        assert_eq!(lm.prob(&["a", "a", "a"], "a").unwrap(), 0.25);
        assert_eq!(lm.prob(&["a", "a", "a"], "d").unwrap(), 0.25);
    }

    #[test]
    fn mixture_hand_values() {
        let lm = abcd(0.5);
        let h = ["a", "a", "b"];
        // 0.5*(2/3) + 0.5*0.25 = 11/24, 0.5*(1/3) + 0.125 = 7/24, 0.125
        assert_relative_eq!(lm.prob(&h, "a").unwrap(), 11.0 / 24.0, max_relative = 1e-15);
        assert_relative_eq!(lm.prob(&h, "b").unwrap(), 7.0 / 24.0, max_relative = 1e-15);
        assert_eq!(lm.prob(&h, "c").unwrap(), 0.125);
        assert_eq!(lm.prob(&h, "d").unwrap(), 0.125);
        let total: f64 = ["a", "b", "c", "d"].iter().map(|t| lm.prob(&h, t).unwrap()).sum();
        assert!((total - 1.0).abs() < 1e-12);
    }

    #[test]
    fn unknown_token_rejected() {
        let lm = abcd(0.5);
        assert!(matches!(lm.prob(&[], "z"), Err(BackendError::UnknownToken(_))));
    }

    #[test]
    fn logprobs_lambda_zero() {
        let lm = abcd(0.0);
        let lp = lm.continuation_logprobs("d d d", "a b").unwrap();
        assert_eq!(lp.logprobs, vec![0.25f64.ln(), 0.25f64.ln()]);
    }

    #[test]
    fn logprobs_condition_on_prompt() {
        let lm = abcd(0.5);
        let lp = lm.continuation_logprobs("a a", "b a").unwrap();
        assert_relative_eq!(lp.logprobs[0], (0.125f64).ln(), max_relative = 1e-15);
        assert_relative_eq!(lp.logprobs[1], (11.0f64 / 24.0).ln(), max_relative = 1e-15);
    }

    #[test]
    fn empty_continuation_rejected() {
        assert!(matches!(
            abcd(0.5).continuation_logprobs("a", "  "),
            Err(BackendError::EmptyContinuation)
        ));
    }

    #[test]
    fn tokenize_maps_unknowns() {
        let params = CacheLmParams::fit(["a a b"], 0.3).unwrap();
        let lm = CacheLm::new(params).unwrap();
        assert_eq!(lm.tokenize("a a b").unwrap(), vec!["a", "a", "b"]);
        assert!(lm.tokenize("").unwrap().is_empty());
        assert_eq!(lm.tokenize("a zz").unwrap(), vec!["a", UNK]);
    }

    #[test]
    fn fit_is_normalized() {
        let params = CacheLmParams::fit(["x y y z", "z z"], 0.5).unwrap();
        assert_eq!(params.vocabulary, vec!["x", "y", "z", UNK]);
        // counts 1,2,3 plus add-one over 6 tokens and 4 entries
        assert_eq!(params.base_unigram, vec![2.0 / 10.0, 3.0 / 10.0, 4.0 / 10.0, 1.0 / 10.0]);
    }

    #[test]
    fn invalid_params() {
        let v = vec!["a".to_string(), "b".to_string()];
        assert!(CacheLmParams::new(v.clone(), vec![0.5, 0.6], 0.1).is_err());
        assert!(CacheLmParams::new(v.clone(), vec![1.0, 0.0], 0.1).is_err());
        assert!(CacheLmParams::uniform(v.clone(), 1.0).is_err());
        assert!(CacheLmParams::uniform(v, -0.1).is_err());
    }

    #[test]
    fn model_id_tracks_params() {
        assert_eq!(abcd(0.5).model_id(), abcd(0.5).model_id());
        assert_ne!(abcd(0.5).model_id(), abcd(0.4).model_id());
    }
}

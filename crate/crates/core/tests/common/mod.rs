//! Test support: a brute-force evaluator for the unigram-cache model and
//! synthetic fixtures. Kept apart from the library's evaluation path.
#![allow(dead_code)]

use std::sync::Arc;

use ctxsel_core::corpus::{AssessmentItem, Sample};
use ctxsel_core::lm_backend::{CacheLm, CacheLmParams, Session, UNK};
use ctxsel_core::scoring::{RandomControl, Scorer, ScoringConfig, Template};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Token-by-token evaluation of the mixture, counting occurrences by a
/// linear scan of the history.
pub fn brute_logprobs(params: &CacheLmParams, prompt: &str, continuation: &str) -> Vec<f64> {
    let norm = |t: &str| -> String {
        if params.vocabulary.iter().any(|v| v == t) {
            t.to_string()
        } else {
            UNK.to_string()
        }
    };
    let mut history: Vec<String> = prompt.split_whitespace().map(norm).collect();
    let mut out = Vec::new();
    for tok in continuation.split_whitespace().map(norm) {
        let pos = params.vocabulary.iter().position(|v| *v == tok).unwrap();
        let base = params.base_unigram[pos];
        let p = if history.is_empty() {
            base
        } else {
            let count = history.iter().filter(|h| **h == tok).count() as f64;
            params.lambda * count / history.len() as f64 + (1.0 - params.lambda) * base
        };
        out.push(p.ln());
        history.push(tok);
    }
    out
}

pub fn brute_ppl(params: &CacheLmParams, prompt: &str, continuation: &str) -> f64 {
    let lps = brute_logprobs(params, prompt, continuation);
    let total: f64 = lps.iter().sum();
    (-total / lps.len() as f64).exp()
}

/// Expected record fields for one pair, from brute-force perplexities.
pub struct OracleRecord {
    pub ppl_base: f64,
    pub ppl_cond: f64,
    pub ppl_rand_draws: Vec<f64>,
    pub ppl_rand: f64,
    pub task_icon: f64,
}

pub fn oracle_record(
    params: &CacheLmParams,
    scorer: &Scorer,
    sample: &Sample,
    item: &AssessmentItem,
    controls: &[RandomControl],
) -> OracleRecord {
    let ppl_base = brute_ppl(params, &scorer.base_prompt(item), &item.reference);
    let ppl_cond = brute_ppl(params, &scorer.conditional_prompt(sample, item), &item.reference);
    let ppl_rand_draws: Vec<f64> = controls
        .iter()
        .map(|c| brute_ppl(params, &scorer.control_prompt(c, item), &item.reference))
        .collect();
    let ppl_rand = ppl_rand_draws.iter().sum::<f64>() / ppl_rand_draws.len() as f64;
    let eps = scorer.config().epsilon;
    OracleRecord {
        ppl_base,
        ppl_cond,
        ppl_rand_draws,
        ppl_rand,
        task_icon: (ppl_rand - ppl_cond) / (ppl_base + eps),
    }
}

pub fn rel_close(a: f64, b: f64, tol: f64) -> bool {
    (a - b).abs() <= tol * a.abs().max(b.abs()).max(f64::MIN_POSITIVE)
}

pub fn words(prefix: &str, n: usize) -> Vec<String> {
    (0..n).map(|i| format!("{prefix}{i}")).collect()
}

pub fn random_text(rng: &mut ChaCha8Rng, vocab: &[String], len: usize) -> String {
    (0..len)
        .map(|_| vocab[rng.gen_range(0..vocab.len())].as_str())
        .collect::<Vec<_>>()
        .join(" ")
}

/// Non-uniform base distribution over `vocab` plus UNK.
pub fn random_params(rng: &mut ChaCha8Rng, vocab: &[String], lambda: f64) -> CacheLmParams {
    let mut vocabulary = vocab.to_vec();
    vocabulary.push(UNK.to_string());
    let weights: Vec<f64> = vocabulary.iter().map(|_| rng.gen_range(0.1..1.0)).collect();
    let total: f64 = weights.iter().sum();
    let mut probs: Vec<f64> = weights.iter().map(|w| w / total).collect();
    let drift = 1.0 - probs.iter().sum::<f64>();
    probs[0] += drift;
    CacheLmParams::new(vocabulary, probs, lambda).unwrap()
}

pub fn session_for(params: CacheLmParams) -> Session {
    Session::in_memory(Arc::new(CacheLm::new(params).unwrap()))
}

pub fn item(id: &str, prompt: &str, reference: &str) -> AssessmentItem {
    AssessmentItem {
        id: id.into(),
        prompt: prompt.into(),
        reference: reference.into(),
        source: "fixture".into(),
        reference_token_count: None,
    }
}

/// 200-sample pool in which the first `planted` samples reuse the
/// assessment vocabulary; the rest use disjoint filler words of the same
/// length. Returns (samples, assessment, planted ids, params).
pub fn planted_fixture(
    seed: u64,
    m: usize,
    planted: usize,
    n_items: usize,
) -> (Vec<Sample>, Vec<AssessmentItem>, Vec<String>, CacheLmParams) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let signal = words("sig", 30);
    let filler = words("fill", 300);
    let prompts = words("ask", 40);
    let assessment: Vec<AssessmentItem> = (0..n_items)
        .map(|i| {
            item(
                &format!("a{i:03}"),
                &random_text(&mut rng, &prompts, 6),
                &random_text(&mut rng, &signal, 12),
            )
        })
        .collect();
    let mut samples = Vec::with_capacity(m);
    let mut planted_ids = Vec::new();
    for j in 0..m {
        let id = format!("s{j:04}");
        let response_vocab = if j < planted { &signal } else { &filler };
        if j < planted {
            planted_ids.push(id.clone());
        }
        samples.push(
            Sample::new(
                id,
                random_text(&mut rng, &prompts, 6),
                None,
                random_text(&mut rng, response_vocab, 12),
                "pool",
            )
            .unwrap(),
        );
    }
    let texts: Vec<String> = samples
        .iter()
        .map(|s| s.full_text())
        .chain(assessment.iter().map(|a| format!("{} {}", a.prompt, a.reference)))
        .collect();
    let params = CacheLmParams::fit(texts.iter().map(String::as_str), 0.5).unwrap();
    (samples, assessment, planted_ids, params)
}

/// Labeled corpus where positives carry a marker token; exactly
/// `floor(n * positive_rate)` positives, spread evenly.
pub fn separable_corpus(seed: u64, n: usize, positive_rate: f64, prefix: &str) -> Vec<(Sample, bool)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let common = words("w", 500);
    (0..n)
        .map(|i| {
            let positive = ((i + 1) as f64 * positive_rate).floor() > (i as f64 * positive_rate).floor();
            let mut response = random_text(&mut rng, &common, 20);
            if positive {
                response.push_str(" zqxmarker");
            }
            let sample = Sample::new(
                format!("{prefix}{i:05}"),
                random_text(&mut rng, &common, 8),
                None,
                response,
                "synthetic",
            )
            .unwrap();
            (sample, positive)
        })
        .collect()
}

/// Small random pool, assessment set, cache-lm parameters and scoring
/// config; responses include out-of-vocabulary words.
pub fn oracle_fixture(seed: u64) -> (Vec<Sample>, Vec<AssessmentItem>, CacheLmParams, ScoringConfig) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let vocab = words("t", rng.gen_range(5..40));
    let lambda = rng.gen_range(0.0..0.95);
    let params = random_params(&mut rng, &vocab, lambda);
    let m = rng.gen_range(1..4);
    let n = rng.gen_range(1..4);
    let samples = (0..m)
        .map(|j| {
            let len = rng.gen_range(1..15);
            let resp_len = rng.gen_range(1..15);
            let instruction = random_text(&mut rng, &vocab, len);
            let response = format!("{} oov{}", random_text(&mut rng, &vocab, resp_len), j);
            Sample::new(format!("s{j}"), instruction, None, response, "fx").unwrap()
        })
        .collect();
    let assessment = (0..n)
        .map(|i| {
            let plen = rng.gen_range(1..10);
            let rlen = rng.gen_range(1..20);
            item(&format!("a{i}"), &random_text(&mut rng, &vocab, plen), &random_text(&mut rng, &vocab, rlen))
        })
        .collect();
    let config = ScoringConfig {
        random_draws: rng.gen_range(1..4),
        random_seed: rng.gen(),
        demo_template: if rng.gen_bool(0.5) { Template::Alpaca } else { Template::Plain },
        query_template: if rng.gen_bool(0.5) { Template::Alpaca } else { Template::Plain },
        ..ScoringConfig::default()
    };
    (samples, assessment, params, config)
}

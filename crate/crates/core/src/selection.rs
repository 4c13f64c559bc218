//! Subset selection from contribution scores.
//!
//! Besides the direct top-K% cut, this module provides the Random / Low-PPL /
//! Top-PPL baselines and a lightweight selector: label the top K% of a scored
//! subset, fit a logistic model over hashed token n-grams, then score any
//! pool locally in one pass.

use std::collections::{HashMap, HashSet};
use std::fs;
use std::io::{BufWriter, Write};
use std::path::Path;

use rand::seq::{index, SliceRandom};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::corpus::{save_corpus, CorpusFormat, Sample};
use crate::error::{ScoringError, SelectionError};
use crate::lm_backend::Session;
use crate::parallel::run_bounded;
use crate::scoring::{ppl_from_logprobs, GlobalScore, Template};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SelectionConfig {
    #[serde(default = "default_k")]
    pub k_percent: f64,
    /// Labeling subset size; the whole scored pool when absent.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub labeling_subset_size: Option<usize>,
    #[serde(default)]
    pub seed: u64,
}

fn default_k() -> f64 {
    15.0
}

impl Default for SelectionConfig {
    fn default() -> Self {
        SelectionConfig {
            k_percent: default_k(),
            labeling_subset_size: None,
            seed: 0,
        }
    }
}

/// `ceil(m * K / 100)`, at least 1 for a non-empty pool. Products within
/// 1e-9 of an integer are taken as that integer so that e.g. K = 100/3 on
/// three samples selects one.
pub fn subset_size(m: usize, k_percent: f64) -> Result<usize, SelectionError> {
    if !(k_percent > 0.0 && k_percent <= 100.0) {
        return Err(SelectionError::InvalidPercent(k_percent));
    }
    if m == 0 {
        return Ok(0);
    }
    let raw = m as f64 * k_percent / 100.0;
    let size = if (raw - raw.round()).abs() < 1e-9 {
        raw.round()
    } else {
        raw.ceil()
    };
    Ok((size as usize).clamp(1, m))
}

/// The first `ceil(m * K / 100)` ids by rank.
pub fn select_top_k(scores: &[GlobalScore], k_percent: f64) -> Result<Vec<String>, SelectionError> {
    let count = subset_size(scores.len(), k_percent)?;
    let mut ranked: Vec<&GlobalScore> = scores.iter().collect();
    ranked.sort_by_key(|g| g.rank);
    Ok(ranked.into_iter().take(count).map(|g| g.sample_id.clone()).collect())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum BaselineMethod {
    Random,
    LowPpl,
    TopPpl,
}

impl std::str::FromStr for BaselineMethod {
    type Err = SelectionError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "random" => Ok(BaselineMethod::Random),
            "low-ppl" => Ok(BaselineMethod::LowPpl),
            "top-ppl" => Ok(BaselineMethod::TopPpl),
            other => Err(SelectionError::UnknownMethod(other.to_string())),
        }
    }
}

/// PPL of each sample's response given its prompt under `template`.
pub fn response_ppls(
    session: &Session,
    samples: &[Sample],
    template: Template,
    concurrency: usize,
) -> Result<HashMap<String, f64>, ScoringError> {
    let results = run_bounded(samples, concurrency, |s| {
        let lp = session.continuation_logprobs(&template.query(&s.prompt()), &s.response)?;
        ppl_from_logprobs(&lp.logprobs)
    });
    let mut out = HashMap::with_capacity(samples.len());
    for (s, r) in samples.iter().zip(results) {
        match r {
            Some(Ok(p)) => {
                out.insert(s.id.clone(), p);
            }
            Some(Err(e)) => return Err(e),
            None => {}
        }
    }
    Ok(out)
}

/// Baseline subsets. PPL methods need `ppls` for every sample; ties order
/// by sample id.
pub fn baseline_select(
    samples: &[Sample],
    ppls: Option<&HashMap<String, f64>>,
    method: BaselineMethod,
    k_percent: f64,
    seed: u64,
) -> Result<Vec<String>, SelectionError> {
    let count = subset_size(samples.len(), k_percent)?;
    match method {
        BaselineMethod::Random => {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            Ok(index::sample(&mut rng, samples.len(), count)
                .into_iter()
                .map(|i| samples[i].id.clone())
                .collect())
        }
        BaselineMethod::LowPpl | BaselineMethod::TopPpl => {
            let ppls = ppls.ok_or_else(|| {
                SelectionError::MissingPpl(samples.first().map(|s| s.id.clone()).unwrap_or_default())
            })?;
            let mut scored = samples
                .iter()
                .map(|s| {
                    ppls.get(&s.id)
                        .map(|&p| (s.id.as_str(), p))
                        .ok_or_else(|| SelectionError::MissingPpl(s.id.clone()))
                })
                .collect::<Result<Vec<_>, _>>()?;
            let descending = method == BaselineMethod::TopPpl;
            scored.sort_by(|a, b| {
                let ord = if descending { b.1.total_cmp(&a.1) } else { a.1.total_cmp(&b.1) };
                ord.then_with(|| a.0.cmp(b.0))
            });
            Ok(scored.into_iter().take(count).map(|(id, _)| id.to_string()).collect())
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Label {
    HighContribution,
    Other,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LabeledSample {
    pub sample_id: String,
    pub label: Label,
    pub global_icon: f64,
}

/// Labels the top K% of a (seeded) labeling subset as high-contribution.
/// Output is in rank order within the subset.
pub fn label_top_k(scores: &[GlobalScore], config: &SelectionConfig) -> Result<Vec<LabeledSample>, SelectionError> {
    let mut pool: Vec<&GlobalScore> = scores.iter().collect();
    pool.sort_by(|a, b| a.sample_id.cmp(&b.sample_id));
    let size = config.labeling_subset_size.unwrap_or(pool.len()).min(pool.len());
    if size < pool.len() {
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let picked = index::sample(&mut rng, pool.len(), size);
        pool = picked.into_iter().map(|i| pool[i]).collect();
    }
    pool.sort_by(|a, b| {
        b.global_icon
            .total_cmp(&a.global_icon)
            .then_with(|| a.sample_id.cmp(&b.sample_id))
    });
    let positives = subset_size(pool.len(), config.k_percent)?;
    Ok(pool
        .into_iter()
        .enumerate()
        .map(|(i, g)| LabeledSample {
            sample_id: g.sample_id.clone(),
            label: if i < positives { Label::HighContribution } else { Label::Other },
            global_icon: g.global_icon,
        })
        .collect())
}

/// Hashed token n-gram features.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct FeatureSpec {
    pub ngram_min: usize,
    pub ngram_max: usize,
    pub buckets_log2: u32,
}

impl Default for FeatureSpec {
    fn default() -> Self {
        FeatureSpec {
            ngram_min: 1,
            ngram_max: 2,
            buckets_log2: 18,
        }
    }
}

fn fnv1a(bytes: impl IntoIterator<Item = u8>) -> u64 {
    let mut hash = 0xcbf2_9ce4_8422_2325u64;
    for b in bytes {
        hash ^= b as u64;
        hash = hash.wrapping_mul(0x0000_0100_0000_01b3);
    }
    hash
}

impl FeatureSpec {
    pub fn buckets(&self) -> usize {
        1 << self.buckets_log2
    }

    /// Binary presence features, L2-normalized, sorted by bucket.
    pub fn featurize(&self, text: &str) -> Vec<(u32, f64)> {
        let lower = text.to_lowercase();
        let tokens: Vec<&str> = lower.split_whitespace().collect();
        let mask = (self.buckets() - 1) as u64;
        let mut buckets = Vec::new();
        for n in self.ngram_min.max(1)..=self.ngram_max {
            for gram in tokens.windows(n) {
                let bytes = std::iter::once(n as u8).chain(gram.iter().enumerate().flat_map(|(i, t)| {
                    let sep: &[u8] = if i == 0 { &[] } else { &[0x1f] };
                    sep.iter().copied().chain(t.bytes())
                }));
                buckets.push((fnv1a(bytes) & mask) as u32);
            }
        }
        buckets.sort_unstable();
        buckets.dedup();
        let value = if buckets.is_empty() { 0.0 } else { 1.0 / (buckets.len() as f64).sqrt() };
        buckets.into_iter().map(|b| (b, value)).collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub k_percent: f64,
    pub seed: u64,
    pub epochs: usize,
    pub learning_rate: f64,
    pub l2: f64,
    pub holdout_fraction: f64,
    pub features: FeatureSpec,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            k_percent: default_k(),
            seed: 0,
            epochs: 20,
            learning_rate: 0.5,
            l2: 1e-6,
            holdout_fraction: 0.2,
            features: FeatureSpec::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainingMetadata {
    pub seed: u64,
    pub epochs: usize,
    pub k_percent: f64,
    pub data_hash: String,
    pub n_train: usize,
    pub n_holdout: usize,
    /// Accuracy on the held-out split at the calibrated threshold.
    pub holdout_accuracy: Option<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SelectorModel {
    pub feature_spec: FeatureSpec,
    pub weights: Vec<f64>,
    pub bias: f64,
    pub threshold: f64,
    pub metadata: TrainingMetadata,
}

fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

impl SelectorModel {
    fn logit(&self, features: &[(u32, f64)]) -> f64 {
        self.bias
            + features
                .iter()
                .map(|&(i, v)| self.weights[i as usize] * v)
                .sum::<f64>()
    }

    pub fn probability(&self, sample: &Sample) -> f64 {
        sigmoid(self.logit(&self.feature_spec.featurize(&sample.full_text())))
    }
}

/// Fits the selector on `(sample, is_high_contribution)` pairs.
///
/// A stratified hold-out split (`holdout_fraction` of each class) is kept
/// aside. The threshold is the K% quantile of the model's probabilities on
/// that split (labels unused), so roughly K% of an unseen pool is selected;
/// memorized training samples score too high to calibrate against. With no
/// hold-out split the training probabilities are used instead.
pub fn train_selector(examples: &[(&Sample, bool)], config: &TrainConfig) -> Result<SelectorModel, SelectionError> {
    subset_size(1, config.k_percent)?;
    let positives: Vec<usize> = (0..examples.len()).filter(|&i| examples[i].1).collect();
    let negatives: Vec<usize> = (0..examples.len()).filter(|&i| !examples[i].1).collect();
    if positives.is_empty() || negatives.is_empty() {
        return Err(SelectionError::SingleClass);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut train = Vec::new();
    let mut holdout = Vec::new();
    for mut class in [positives, negatives] {
        class.shuffle(&mut rng);
        let hold = ((class.len() as f64) * config.holdout_fraction).floor() as usize;
        let hold = hold.min(class.len() - 1);
        holdout.extend_from_slice(&class[..hold]);
        train.extend_from_slice(&class[hold..]);
    }
    train.sort_unstable();
    holdout.sort_unstable();

    let spec = config.features;
    let feats: Vec<Vec<(u32, f64)>> = examples.iter().map(|(s, _)| spec.featurize(&s.full_text())).collect();
    let mut weights = vec![0.0; spec.buckets()];
    let mut bias = 0.0;
    let mut order = train.clone();
    for epoch in 0..config.epochs {
        order.shuffle(&mut rng);
        let lr = config.learning_rate / (1.0 + epoch as f64).sqrt();
        for &i in &order {
            let x = &feats[i];
            let z = bias + x.iter().map(|&(j, v)| weights[j as usize] * v).sum::<f64>();
            let y = if examples[i].1 { 1.0 } else { 0.0 };
            let grad = sigmoid(z) - y;
            for &(j, v) in x {
                let w = &mut weights[j as usize];
                *w -= lr * (grad * v + config.l2 * *w);
            }
            bias -= lr * grad;
        }
    }

    let mut model = SelectorModel {
        feature_spec: spec,
        weights,
        bias,
        threshold: 0.5,
        metadata: TrainingMetadata {
            seed: config.seed,
            epochs: config.epochs,
            k_percent: config.k_percent,
            data_hash: data_hash(examples),
            n_train: train.len(),
            n_holdout: holdout.len(),
            holdout_accuracy: None,
        },
    };
    let calibration = if holdout.is_empty() { &train } else { &holdout };
    let mut probs: Vec<f64> = calibration.iter().map(|&i| sigmoid(model.logit(&feats[i]))).collect();
    probs.sort_by(|a, b| b.total_cmp(a));
    let k = subset_size(probs.len(), config.k_percent)?;
    model.threshold = probs[k - 1];
    if !holdout.is_empty() {
        let correct = holdout
            .iter()
            .filter(|&&i| (sigmoid(model.logit(&feats[i])) >= model.threshold) == examples[i].1)
            .count();
        model.metadata.holdout_accuracy = Some(correct as f64 / holdout.len() as f64);
    }
    Ok(model)
}

fn data_hash(examples: &[(&Sample, bool)]) -> String {
    let mut hasher = Sha256::new();
    for (s, label) in examples {
        hasher.update(s.content_hash().as_bytes());
        hasher.update([*label as u8]);
    }
    hex::encode(hasher.finalize())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SelectorScore {
    pub sample_id: String,
    pub probability: f64,
    pub selected: bool,
}

/// One local pass over the pool; output order matches input order. Returns
/// the scores and the number of model evaluations performed.
pub fn apply_selector(model: &SelectorModel, pool: &[Sample]) -> (Vec<SelectorScore>, usize) {
    let mut evaluations = 0;
    let scores = pool
        .iter()
        .map(|s| {
            evaluations += 1;
            let probability = model.probability(s);
            SelectorScore {
                sample_id: s.id.clone(),
                probability,
                selected: probability >= model.threshold,
            }
        })
        .collect();
    (scores, evaluations)
}

/// Area under the ROC curve via the rank-sum statistic, ties averaged.
/// `None` when either class is absent.
pub fn roc_auc(scores: &[f64], labels: &[bool]) -> Option<f64> {
    let n_pos = labels.iter().filter(|&&l| l).count();
    let n_neg = labels.len() - n_pos;
    if n_pos == 0 || n_neg == 0 {
        return None;
    }
    let mut idx: Vec<usize> = (0..scores.len()).collect();
    idx.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    let mut rank_sum = 0.0;
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j + 1 < idx.len() && scores[idx[j + 1]] == scores[idx[i]] {
            j += 1;
        }
        let avg_rank = (i + j) as f64 / 2.0 + 1.0;
        rank_sum += idx[i..=j].iter().filter(|&&k| labels[k]).count() as f64 * avg_rank;
        i = j + 1;
    }
    let u = rank_sum - (n_pos * (n_pos + 1)) as f64 / 2.0;
    Some(u / (n_pos * n_neg) as f64)
}

const MODEL_VERSION: u32 = 1;

fn hex_f64(v: f64) -> String {
    format!("{:016x}", v.to_bits())
}

fn parse_hex_f64(s: &str) -> Result<f64, SelectionError> {
    u64::from_str_radix(s, 16)
        .map(f64::from_bits)
        .map_err(|e| SelectionError::MalformedModel(format!("bad float {s:?}: {e}")))
}

#[derive(Serialize, Deserialize)]
struct ModelFile {
    version: u32,
    feature_spec: FeatureSpec,
    /// Length of the weight vector (buckets); the bias is stored apart.
    weight_count: usize,
    /// Non-zero weights as `[bucket, bits]` with bits in base 16.
    weights: Vec<(u32, String)>,
    bias: String,
    threshold: String,
    metadata: TrainingMetadata,
}

impl SelectorModel {
    pub fn to_json(&self) -> Result<String, SelectionError> {
        let file = ModelFile {
            version: MODEL_VERSION,
            feature_spec: self.feature_spec,
            weight_count: self.weights.len(),
            weights: self
                .weights
                .iter()
                .enumerate()
                .filter(|(_, w)| **w != 0.0)
                .map(|(i, w)| (i as u32, hex_f64(*w)))
                .collect(),
            bias: hex_f64(self.bias),
            threshold: hex_f64(self.threshold),
            metadata: self.metadata.clone(),
        };
        Ok(serde_json::to_string_pretty(&file)?)
    }

    pub fn from_json(text: &str) -> Result<Self, SelectionError> {
        let file: ModelFile = serde_json::from_str(text)?;
        if file.version != MODEL_VERSION {
            return Err(SelectionError::ModelVersion(file.version));
        }
        if file.weight_count != file.feature_spec.buckets() {
            return Err(SelectionError::MalformedModel(format!(
                "{} weights for {} buckets",
                file.weight_count,
                file.feature_spec.buckets()
            )));
        }
        let mut weights = vec![0.0; file.weight_count];
        for (i, bits) in &file.weights {
            let slot = weights
                .get_mut(*i as usize)
                .ok_or_else(|| SelectionError::MalformedModel(format!("bucket {i} out of range")))?;
            *slot = parse_hex_f64(bits)?;
        }
        let model = SelectorModel {
            feature_spec: file.feature_spec,
            weights,
            bias: parse_hex_f64(&file.bias)?,
            threshold: parse_hex_f64(&file.threshold)?,
            metadata: file.metadata,
        };
        if !model.weights.iter().chain([&model.bias]).all(|w| w.is_finite()) {
            return Err(SelectionError::MalformedModel("non-finite weight".into()));
        }
        Ok(model)
    }

    pub fn save(&self, path: &Path) -> Result<(), SelectionError> {
        fs::write(path, self.to_json()? + "\n").map_err(|source| SelectionError::Io {
            path: path.to_path_buf(),
            source,
        })
    }

    pub fn load(path: &Path) -> Result<Self, SelectionError> {
        let text = fs::read_to_string(path).map_err(|source| SelectionError::Io {
            path: path.to_path_buf(),
            source,
        })?;
        Self::from_json(&text)
    }
}

/// One line of the labeled-data export.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LabeledRecord {
    pub instruction: String,
    pub input: String,
    pub response: String,
    pub label: Label,
}

/// Writes `{instruction, input, response, label}` lines in `labeled` order.
/// Returns the number of positive lines.
pub fn export_labeled(labeled: &[LabeledSample], samples: &[Sample], path: &Path) -> Result<usize, SelectionError> {
    let by_id: HashMap<&str, &Sample> = samples.iter().map(|s| (s.id.as_str(), s)).collect();
    let io_err = |source| SelectionError::Io {
        path: path.to_path_buf(),
        source,
    };
    if labeled.is_empty() {
        log::warn!("no labeled samples; writing an empty {}", path.display());
    }
    let mut out = BufWriter::new(fs::File::create(path).map_err(io_err)?);
    let mut positives = 0;
    for l in labeled {
        let s = by_id
            .get(l.sample_id.as_str())
            .ok_or_else(|| SelectionError::UnknownId(l.sample_id.clone()))?;
        positives += usize::from(l.label == Label::HighContribution);
        let record = LabeledRecord {
            instruction: s.instruction.clone(),
            input: s.input.clone().unwrap_or_default(),
            response: s.response.clone(),
            label: l.label,
        };
        serde_json::to_writer(&mut out, &record)?;
        out.write_all(b"\n").map_err(io_err)?;
    }
    out.flush().map_err(io_err)?;
    Ok(positives)
}

pub fn read_labeled(path: &Path) -> Result<Vec<LabeledRecord>, SelectionError> {
    crate::jsonl::read_jsonl(path).map_err(|source| SelectionError::Io {
        path: path.to_path_buf(),
        source,
    })
}

/// Writes the selected samples, in `selected_ids` order.
pub fn export_subset(
    samples: &[Sample],
    selected_ids: &[String],
    path: &Path,
    format: CorpusFormat,
) -> Result<(), SelectionError> {
    let by_id: HashMap<&str, &Sample> = samples.iter().map(|s| (s.id.as_str(), s)).collect();
    let mut seen = HashSet::new();
    let subset = selected_ids
        .iter()
        .filter(|id| seen.insert(id.as_str()))
        .map(|id| {
            by_id
                .get(id.as_str())
                .map(|s| (*s).clone())
                .ok_or_else(|| SelectionError::UnknownId(id.clone()))
        })
        .collect::<Result<Vec<_>, _>>()?;
    save_corpus(&subset, path, format).map_err(|e| match e {
        crate::error::CorpusError::Io { path, source } => SelectionError::Io { path, source },
        other => SelectionError::MalformedModel(other.to_string()),
    })
}

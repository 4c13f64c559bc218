//! In-context contribution scores.
//!
//! For an assessment item `S = (x, y)` and a candidate sample `T`:
//!
//! * base perplexity: `PPL(y | x)`
//! * conditional perplexity: `PPL(y | T, x)`, with `T` serialized as a
//!   demonstration ahead of the query
//! * control perplexity: `PPL(y | T_rand, x)`, where `T_rand` is a uniformly
//!   random token sequence with exactly as many backend tokens as the
//!   serialized demonstration, averaged over the configured number of draws
//! * task score: `(PPL(y | T_rand, x) - PPL(y | T, x)) / (PPL(y | x) + eps)`
//! * global score: the unweighted mean of a sample's task scores over every
//!   assessment item.
//!
//! Positive scores mean the demonstration helps more than length-matched
//! noise.

use std::fs;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::corpus::{check_disjoint, AssessmentItem, Sample};
use crate::error::{BackendError, ScoringError};
use crate::lm_backend::Session;
use crate::parallel::run_bounded;

/// Placed between the demonstration (or its control) and the query.
pub const DEMO_SEPARATOR: &str = "\n\n";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Template {
    /// `### Instruction:` / `### Response:` blocks.
    Alpaca,
    /// Prompt line followed directly by the response.
    Plain,
}

impl Template {
    pub fn query(self, prompt: &str) -> String {
        match self {
            Template::Alpaca => format!("### Instruction:\n{prompt}\n\n### Response:\n"),
            Template::Plain => format!("{prompt}\n"),
        }
    }

    pub fn demonstration(self, sample: &Sample) -> String {
        format!("{}{}", self.query(&sample.prompt()), sample.response)
    }
}

impl std::str::FromStr for Template {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "alpaca" => Ok(Template::Alpaca),
            "plain" => Ok(Template::Plain),
            other => Err(format!("unknown template {other:?} (expected alpaca or plain)")),
        }
    }
}

/// Unit in which control sequences match the demonstration's length.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum LengthUnit {
    #[default]
    Tokens,
    /// Degraded mode for backends that cannot echo their tokenization.
    Chars,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScoringConfig {
    #[serde(default = "default_epsilon")]
    pub epsilon: f64,
    #[serde(default = "default_draws")]
    pub random_draws: u32,
    #[serde(default)]
    pub random_seed: u64,
    #[serde(default = "default_template")]
    pub demo_template: Template,
    #[serde(default = "default_template")]
    pub query_template: Template,
    #[serde(default)]
    pub length_unit: LengthUnit,
}

fn default_epsilon() -> f64 {
    1e-8
}
fn default_draws() -> u32 {
    1
}
fn default_template() -> Template {
    Template::Alpaca
}

impl Default for ScoringConfig {
    fn default() -> Self {
        ScoringConfig {
            epsilon: default_epsilon(),
            random_draws: default_draws(),
            random_seed: 0,
            demo_template: default_template(),
            query_template: default_template(),
            length_unit: LengthUnit::Tokens,
        }
    }
}

impl ScoringConfig {
    pub fn validate(&self) -> Result<(), ScoringError> {
        if !(self.epsilon.is_finite() && self.epsilon > 0.0) {
            return Err(ScoringError::Config(format!("epsilon must be positive, got {}", self.epsilon)));
        }
        if self.random_draws == 0 {
            return Err(ScoringError::Config("random_draws must be at least 1".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoreRecord {
    pub sample_id: String,
    pub assessment_id: String,
    pub ppl_base: f64,
    pub ppl_cond: f64,
    /// Mean of `ppl_rand_draws`.
    pub ppl_rand: f64,
    pub ppl_rand_draws: Vec<f64>,
    pub task_icon: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GlobalScore {
    pub sample_id: String,
    pub global_icon: f64,
    pub task_count: usize,
    pub rank: usize,
}

/// Random stand-in for one sample's demonstration.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RandomControl {
    pub sample_id: String,
    pub draw_index: u32,
    pub tokens: Vec<String>,
    /// Text inserted into the context in place of the demonstration.
    pub text: String,
    pub seed: u64,
}

/// `exp(-mean(logprobs))`.
pub fn ppl_from_logprobs(logprobs: &[f64]) -> Result<f64, ScoringError> {
    if logprobs.is_empty() {
        return Err(ScoringError::EmptyLogprobs);
    }
    let mean = logprobs.iter().sum::<f64>() / logprobs.len() as f64;
    Ok((-mean).exp())
}

/// `(ppl_rand - ppl_cond) / (ppl_base + epsilon)`.
pub fn task_icon(ppl_base: f64, ppl_cond: f64, ppl_rand: f64, epsilon: f64) -> Result<f64, ScoringError> {
    for (name, v) in [("ppl_base", ppl_base), ("ppl_cond", ppl_cond), ("ppl_rand", ppl_rand)] {
        if !(v.is_finite() && v > 0.0) {
            return Err(ScoringError::NonFinite(format!("{name} = {v}")));
        }
    }
    if !(epsilon.is_finite() && epsilon >= 0.0) {
        return Err(ScoringError::NonFinite(format!("epsilon = {epsilon}")));
    }
    Ok((ppl_rand - ppl_cond) / (ppl_base + epsilon))
}

/// Unweighted mean over assessment items.
pub fn global_icon(task_scores: &[f64]) -> Result<f64, ScoringError> {
    if task_scores.is_empty() {
        return Err(ScoringError::NoTaskScores);
    }
    Ok(task_scores.iter().sum::<f64>() / task_scores.len() as f64)
}

/// Ranks by descending score, ties by ascending sample id. Output is in
/// rank order.
pub fn rank_globals(scores: Vec<(String, f64, usize)>) -> Vec<GlobalScore> {
    let mut scores = scores;
    scores.sort_by(|a, b| b.1.total_cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
    scores
        .into_iter()
        .enumerate()
        .map(|(i, (sample_id, global_icon, task_count))| GlobalScore {
            sample_id,
            global_icon,
            task_count,
            rank: i + 1,
        })
        .collect()
}

/// Seed for one control draw, a pure function of its inputs.
pub fn control_seed(random_seed: u64, sample_id: &str, draw_index: u32) -> u64 {
    let mut hasher = Sha256::new();
    hasher.update(random_seed.to_le_bytes());
    hasher.update((sample_id.len() as u64).to_le_bytes());
    hasher.update(sample_id.as_bytes());
    hasher.update(draw_index.to_le_bytes());
    let digest = hasher.finalize();
    u64::from_le_bytes(digest[..8].try_into().unwrap())
}

/// Evaluates the individual probes against one session.
#[derive(Debug, Clone, Copy)]
pub struct Scorer<'a> {
    session: &'a Session,
    config: &'a ScoringConfig,
}

impl<'a> Scorer<'a> {
    pub fn new(session: &'a Session, config: &'a ScoringConfig) -> Result<Self, ScoringError> {
        config.validate()?;
        Ok(Scorer { session, config })
    }

    pub fn config(&self) -> &ScoringConfig {
        self.config
    }

    pub fn base_prompt(&self, item: &AssessmentItem) -> String {
        self.config.query_template.query(&item.prompt)
    }

    pub fn demonstration(&self, sample: &Sample) -> String {
        self.config.demo_template.demonstration(sample)
    }

    pub fn conditional_prompt(&self, sample: &Sample, item: &AssessmentItem) -> String {
        format!("{}{DEMO_SEPARATOR}{}", self.demonstration(sample), self.base_prompt(item))
    }

    pub fn control_prompt(&self, control: &RandomControl, item: &AssessmentItem) -> String {
        format!("{}{DEMO_SEPARATOR}{}", control.text, self.base_prompt(item))
    }

    /// Draws the control sequence for `(sample, draw_index)`.
    pub fn random_control(&self, sample: &Sample, draw_index: u32) -> Result<RandomControl, ScoringError> {
        let model = self.session.model();
        let vocab = model.control_vocabulary()?;
        if vocab.is_empty() {
            return Err(BackendError::Config("empty control vocabulary".into()).into());
        }
        let seed = control_seed(self.config.random_seed, &sample.id, draw_index);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let demo = self.demonstration(sample);
        let (tokens, text) = match self.config.length_unit {
            LengthUnit::Tokens => {
                let len = self.session.tokenize(&demo)?.len();
                let tokens: Vec<String> = (0..len).map(|_| vocab[rng.gen_range(0..vocab.len())].clone()).collect();
                let text = model.detokenize(&tokens);
                (tokens, text)
            }
            LengthUnit::Chars => {
                let target = demo.chars().count();
                let mut tokens = Vec::new();
                let mut text = String::new();
                while text.chars().count() < target {
                    tokens.push(vocab[rng.gen_range(0..vocab.len())].clone());
                    text = model.detokenize(&tokens);
                }
                let text: String = text.chars().take(target).collect();
                (tokens, text)
            }
        };
        Ok(RandomControl {
            sample_id: sample.id.clone(),
            draw_index,
            tokens,
            text,
            seed,
        })
    }

    fn ppl(&self, prompt: &str, continuation: &str, ids: (&str, &str)) -> Result<f64, ScoringError> {
        if let Some(limit) = self.session.model().context_limit() {
            let tokens = self.session.tokenize(prompt)?.len() + self.session.tokenize(continuation)?.len();
            if tokens > limit {
                return Err(ScoringError::ContextOverflow {
                    sample_id: ids.0.to_string(),
                    assessment_id: ids.1.to_string(),
                    tokens,
                    limit,
                });
            }
        }
        let lp = self.session.continuation_logprobs(prompt, continuation)?;
        ppl_from_logprobs(&lp.logprobs)
    }

    pub fn base_ppl(&self, item: &AssessmentItem) -> Result<f64, ScoringError> {
        self.ppl(&self.base_prompt(item), &item.reference, ("-", &item.id))
    }

    pub fn conditional_ppl(&self, sample: &Sample, item: &AssessmentItem) -> Result<f64, ScoringError> {
        self.ppl(&self.conditional_prompt(sample, item), &item.reference, (&sample.id, &item.id))
    }

    pub fn control_ppl(&self, control: &RandomControl, item: &AssessmentItem) -> Result<f64, ScoringError> {
        self.ppl(&self.control_prompt(control, item), &item.reference, (&control.sample_id, &item.id))
    }

    /// Mean control perplexity and the per-draw values.
    pub fn random_control_ppl(&self, sample: &Sample, item: &AssessmentItem) -> Result<(f64, Vec<f64>), ScoringError> {
        let draws = (0..self.config.random_draws)
            .map(|d| {
                let control = self.random_control(sample, d)?;
                self.control_ppl(&control, item)
            })
            .collect::<Result<Vec<f64>, _>>()?;
        Ok((mean(&draws), draws))
    }

    pub fn score_pair(&self, sample: &Sample, item: &AssessmentItem) -> Result<ScoreRecord, ScoringError> {
        let ppl_base = self.base_ppl(item)?;
        let ppl_cond = self.conditional_ppl(sample, item)?;
        let (ppl_rand, ppl_rand_draws) = self.random_control_ppl(sample, item)?;
        Ok(ScoreRecord {
            sample_id: sample.id.clone(),
            assessment_id: item.id.clone(),
            ppl_base,
            ppl_cond,
            ppl_rand,
            ppl_rand_draws,
            task_icon: task_icon(ppl_base, ppl_cond, ppl_rand, self.config.epsilon)?,
        })
    }
}

fn mean(values: &[f64]) -> f64 {
    values.iter().sum::<f64>() / values.len() as f64
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ProbeKind {
    Base,
    Demo,
    Control,
}

/// Identifies one backend query of a scoring run.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ProbeKey {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub sample_id: Option<String>,
    pub assessment_id: String,
    pub probe: ProbeKind,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub draw: Option<u32>,
}

/// Completed probes of an interrupted run.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub total: usize,
    pub completed: Vec<ProbeKey>,
}

impl Checkpoint {
    pub fn load(path: &Path) -> Result<Option<Self>, ScoringError> {
        if !path.exists() {
            return Ok(None);
        }
        let text = fs::read_to_string(path).map_err(|source| ScoringError::Checkpoint {
            path: path.to_path_buf(),
            source,
        })?;
        Ok(Some(serde_json::from_str(&text)?))
    }

    fn save(&self, path: &Path) -> Result<(), ScoringError> {
        let bytes = serde_json::to_vec_pretty(self)?;
        fs::write(path, bytes).map_err(|source| ScoringError::Checkpoint {
            path: path.to_path_buf(),
            source,
        })
    }
}

#[derive(Debug, Clone, Default)]
pub struct PoolOptions<'p> {
    /// Written when the run stops early, removed when it completes.
    pub checkpoint: Option<&'p Path>,
    /// Worker threads; defaults to 1.
    pub concurrency: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PoolScores {
    /// Sample-major, in input order.
    pub records: Vec<ScoreRecord>,
    /// In rank order.
    pub globals: Vec<GlobalScore>,
}

enum Probe {
    Base { item: usize },
    Demo { sample: usize, item: usize },
    Control { sample: usize, item: usize, draw: u32 },
}

/// Number of uncached backend calls a cold run issues: one base query per
/// item, plus one demonstration and `draws` control queries per pair.
pub fn expected_calls(m: usize, n: usize, draws: u32) -> u64 {
    (n + m * n * (1 + draws as usize)) as u64
}

/// Scores every (sample, item) pair and ranks the samples.
pub fn score_pool(
    session: &Session,
    samples: &[Sample],
    assessment: &[AssessmentItem],
    config: &ScoringConfig,
    options: &PoolOptions,
) -> Result<PoolScores, ScoringError> {
    let scorer = Scorer::new(session, config)?;
    let report = check_disjoint(assessment, samples);
    if !report.is_disjoint() {
        return Err(ScoringError::NotDisjoint(report.collisions.len()));
    }
    let workers = options.concurrency.max(1);
    let draws = config.random_draws;

    let control_jobs: Vec<(usize, u32)> = (0..samples.len())
        .flat_map(|s| (0..draws).map(move |d| (s, d)))
        .collect();
    let controls = run_bounded(&control_jobs, workers, |&(s, d)| scorer.random_control(&samples[s], d));
    let controls: Vec<RandomControl> = match controls.into_iter().collect::<Option<Result<Vec<_>, _>>>() {
        Some(Ok(c)) => c,
        Some(Err(e)) => return Err(incomplete(e, 0, expected_calls(samples.len(), assessment.len(), draws))),
        None => unreachable!("control generation halts only on error"),
    };
    let control_of = |s: usize, d: u32| &controls[s * draws as usize + d as usize];

    let mut probes = Vec::with_capacity(expected_calls(samples.len(), assessment.len(), draws) as usize);
    probes.extend((0..assessment.len()).map(|item| Probe::Base { item }));
    for sample in 0..samples.len() {
        for item in 0..assessment.len() {
            probes.push(Probe::Demo { sample, item });
            probes.extend((0..draws).map(|draw| Probe::Control { sample, item, draw }));
        }
    }

    let results = run_bounded(&probes, workers, |probe| match *probe {
        Probe::Base { item } => scorer.base_ppl(&assessment[item]),
        Probe::Demo { sample, item } => scorer.conditional_ppl(&samples[sample], &assessment[item]),
        Probe::Control { sample, item, draw } => scorer.control_ppl(control_of(sample, draw), &assessment[item]),
    });

    let key_of = |probe: &Probe| match *probe {
        Probe::Base { item } => ProbeKey {
            sample_id: None,
            assessment_id: assessment[item].id.clone(),
            probe: ProbeKind::Base,
            draw: None,
        },
        Probe::Demo { sample, item } => ProbeKey {
            sample_id: Some(samples[sample].id.clone()),
            assessment_id: assessment[item].id.clone(),
            probe: ProbeKind::Demo,
            draw: None,
        },
        Probe::Control { sample, item, draw } => ProbeKey {
            sample_id: Some(samples[sample].id.clone()),
            assessment_id: assessment[item].id.clone(),
            probe: ProbeKind::Control,
            draw: Some(draw),
        },
    };

    if results.iter().any(|r| !matches!(r, Some(Ok(_)))) {
        let completed: Vec<ProbeKey> = probes
            .iter()
            .zip(&results)
            .filter(|(_, r)| matches!(r, Some(Ok(_))))
            .map(|(p, _)| key_of(p))
            .collect();
        let done = completed.len();
        if let Some(path) = options.checkpoint {
            Checkpoint {
                total: probes.len(),
                completed,
            }
            .save(path)?;
        }
        let first_err = results
            .into_iter()
            .find_map(|r| match r {
                Some(Err(e)) => Some(e),
                _ => None,
            })
            .expect("an incomplete run has a failed probe");
        return Err(incomplete(first_err, done, probes.len() as u64));
    }

    let values: Vec<f64> = results.into_iter().map(|r| r.unwrap().unwrap()).collect();
    let n = assessment.len();
    let per_pair = 1 + draws as usize;
    let mut records = Vec::with_capacity(samples.len() * n);
    let mut globals = Vec::with_capacity(samples.len());
    for (s, sample) in samples.iter().enumerate() {
        let mut task_scores = Vec::with_capacity(n);
        for (i, item) in assessment.iter().enumerate() {
            let at = n + (s * n + i) * per_pair;
            let ppl_base = values[i];
            let ppl_cond = values[at];
            let ppl_rand_draws = values[at + 1..at + per_pair].to_vec();
            let ppl_rand = mean(&ppl_rand_draws);
            let score = task_icon(ppl_base, ppl_cond, ppl_rand, config.epsilon)?;
            task_scores.push(score);
            records.push(ScoreRecord {
                sample_id: sample.id.clone(),
                assessment_id: item.id.clone(),
                ppl_base,
                ppl_cond,
                ppl_rand,
                ppl_rand_draws,
                task_icon: score,
            });
        }
        if n > 0 {
            globals.push((sample.id.clone(), global_icon(&task_scores)?, n));
        }
    }
    if let Some(path) = options.checkpoint {
        if path.exists() {
            fs::remove_file(path).map_err(|source| ScoringError::Checkpoint {
                path: path.to_path_buf(),
                source,
            })?;
        }
    }
    Ok(PoolScores {
        records,
        globals: rank_globals(globals),
    })
}

fn incomplete(err: ScoringError, completed: usize, total: u64) -> ScoringError {
    match err {
        ScoringError::Backend(cause) => ScoringError::Incomplete {
            completed,
            total: total as usize,
            cause,
        },
        other => other,
    }
}

#[derive(Serialize)]
struct RecordRow<'a> {
    sample_id: &'a str,
    assessment_id: &'a str,
    ppl_base: f64,
    ppl_cond: f64,
    ppl_rand: f64,
    ppl_rand_draws: String,
    task_icon: f64,
}

/// CSV mirror of the score records; per-draw values are `;`-joined.
pub fn write_records_csv<W: std::io::Write>(out: W, records: &[ScoreRecord]) -> Result<(), ScoringError> {
    let mut w = csv::Writer::from_writer(out);
    for r in records {
        let draws: Vec<String> = r.ppl_rand_draws.iter().map(f64::to_string).collect();
        w.serialize(RecordRow {
            sample_id: &r.sample_id,
            assessment_id: &r.assessment_id,
            ppl_base: r.ppl_base,
            ppl_cond: r.ppl_cond,
            ppl_rand: r.ppl_rand,
            ppl_rand_draws: draws.join(";"),
            task_icon: r.task_icon,
        })?;
    }
    w.flush().map_err(|e| ScoringError::Csv(e.into()))
}

pub fn write_globals_csv<W: std::io::Write>(out: W, globals: &[GlobalScore]) -> Result<(), ScoringError> {
    let mut w = csv::Writer::from_writer(out);
    for g in globals {
        w.serialize(g)?;
    }
    w.flush().map_err(|e| ScoringError::Csv(e.into()))
}

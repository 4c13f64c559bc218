use std::collections::{HashMap, HashSet};
use std::fs;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use ctxsel_core::analysis::{
    distribution_report, ifd_score, pairwise_report, DifficultyRecord, DistributionReport, JudgmentRecord,
    PairwiseReport,
};
use ctxsel_core::corpus::{
    build_assessment, check_disjoint, load_assessment, load_corpus, save_assessment, AssessmentItem, CorpusFormat,
    Sample,
};
use ctxsel_core::jsonl::read_jsonl;
use ctxsel_core::lm_backend::{
    BackendKind, CacheLm, CacheLmParams, CallAccounting, LanguageModel, RemoteLm, ScoreCache, Session,
};
use ctxsel_core::scoring::{
    expected_calls, score_pool, write_globals_csv, write_records_csv, Checkpoint, GlobalScore, PoolOptions,
};
use ctxsel_core::selection::{
    apply_selector, baseline_select, export_labeled, export_subset, label_top_k, response_ppls, select_top_k,
    train_selector, BaselineMethod, SelectorModel,
};
use serde::Serialize;
use serde_json::{json, Value};

use crate::config::{Resolved, RunConfig};
use crate::error::CliError;
use crate::output::{write_csv, write_file, write_json, write_jsonl, write_manifest};

/// Per-invocation settings that never enter the run hash.
#[derive(Debug, Clone)]
pub struct Context {
    pub resolved: Resolved,
    pub resume: bool,
    pub max_calls: Option<u64>,
}

impl Context {
    fn config(&self) -> &RunConfig {
        &self.resolved.config
    }
}

pub const SCORES: &str = "scores.jsonl";
pub const GLOBAL_SCORES: &str = "global_scores.jsonl";
pub const CHECKPOINT: &str = "score_checkpoint.json";
pub const SELECTOR: &str = "selector.json";

fn require_file(path: &Path, what: &str) -> Result<(), CliError> {
    if path.is_file() {
        Ok(())
    } else {
        Err(CliError::Config(format!("{what} {} does not exist", path.display())))
    }
}

fn corpus_path(config: &RunConfig) -> Result<PathBuf, CliError> {
    let path = config
        .paths
        .corpus
        .clone()
        .ok_or_else(|| CliError::Config("paths.corpus is not set".into()))?;
    require_file(&path, "corpus")?;
    Ok(path)
}

fn load_pool(config: &RunConfig, path: &Path) -> Result<Vec<Sample>, CliError> {
    Ok(load_corpus(path, config.corpus_format(path))?)
}

fn read_globals(config: &RunConfig) -> Result<Vec<GlobalScore>, CliError> {
    let path = config.output(GLOBAL_SCORES);
    require_file(&path, "global scores (run `score` first)")?;
    read_jsonl(&path).map_err(|e| CliError::io(&path, e))
}

fn cache_lm_params(config: &RunConfig, samples: &[Sample], items: &[AssessmentItem]) -> Result<CacheLmParams, CliError> {
    if let Some(path) = &config.backend.params_path {
        require_file(path, "cache-lm params")?;
        let text = fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
        let p: CacheLmParams = serde_json::from_str(&text)?;
        return Ok(CacheLmParams::new(p.vocabulary, p.base_unigram, p.lambda)?);
    }
    let texts: Vec<String> = samples
        .iter()
        .map(Sample::full_text)
        .chain(items.iter().map(|a| format!("{} {}", a.prompt, a.reference)))
        .collect();
    Ok(CacheLmParams::fit(texts.iter().map(String::as_str), config.backend.lambda)?)
}

/// The corpus plus the assessment set when one exists; the cache-lm
/// vocabulary is fitted on both so every command sees the same model.
fn model_inputs(config: &RunConfig) -> Result<(Vec<Sample>, Vec<AssessmentItem>), CliError> {
    let samples = load_pool(config, &corpus_path(config)?)?;
    let path = config.assessment_path();
    let items = if path.is_file() { load_assessment(&path)? } else { Vec::new() };
    Ok((samples, items))
}

fn open_session(ctx: &Context, samples: &[Sample], items: &[AssessmentItem]) -> Result<Session, CliError> {
    let config = ctx.config();
    let model: Arc<dyn LanguageModel> = match config.backend.kind {
        BackendKind::CacheLm => {
            let params = cache_lm_params(config, samples, items)?;
            log::info!("cache-lm: {} vocabulary entries, lambda {}", params.vocabulary.len(), params.lambda);
            Arc::new(CacheLm::new(params)?)
        }
        BackendKind::Remote => Arc::new(RemoteLm::new(&config.backend)?),
    };
    let cache_path = config.cache_path();
    if let Some(parent) = cache_path.parent() {
        fs::create_dir_all(parent).map_err(|e| CliError::io(parent, e))?;
    }
    let cache = ScoreCache::open(&cache_path)?;
    log::info!("model {}; cache {} ({} entries)", model.model_id(), cache_path.display(), cache.len());
    Ok(Session::new(model, cache).with_call_budget(ctx.max_calls))
}

pub fn build_assessment_cmd(ctx: &Context) -> Result<(), CliError> {
    let config = ctx.config();
    let a = &config.assessment;
    if a.sources.is_empty() {
        return Err(CliError::Config("assessment.sources is empty".into()));
    }
    for s in &a.sources {
        require_file(&s.path, &format!("assessment source {:?}", s.tag))?;
    }
    let corpus = match &config.paths.corpus {
        Some(_) => Some(corpus_path(config)?),
        None => None,
    };
    let (items, manifest) = build_assessment(&a.sources, a.size, a.seed)?;
    let hash = config.run_hash("build-assessment");
    if let Some(corpus) = corpus {
        let samples = load_pool(config, &corpus)?;
        let report = check_disjoint(&items, &samples);
        if !report.is_disjoint() {
            let path = config.output("collisions.json");
            write_json(&path, &report, &hash)?;
            write_manifest(&ctx.resolved, "build-assessment", "collision", None, vec![path.clone()], &manifest)?;
            return Err(CliError::Data(format!(
                "{} assessment items also appear in the corpus; see {}",
                report.collisions.len(),
                path.display()
            )));
        }
    }
    let out = config.output("assessment.jsonl");
    fs::create_dir_all(&config.paths.output_dir).map_err(|e| CliError::io(&config.paths.output_dir, e))?;
    save_assessment(&items, &out)?;
    let m = write_manifest(&ctx.resolved, "build-assessment", "complete", None, vec![out.clone()], &manifest)?;
    eprintln!("wrote {} assessment items to {} ({})", items.len(), out.display(), m.display());
    Ok(())
}

#[derive(Serialize)]
struct ScoreDetails {
    samples: usize,
    items: usize,
    random_draws: u32,
    expected_cold_calls: u64,
    resumed_from: Option<Value>,
    #[serde(skip_serializing_if = "Option::is_none")]
    error: Option<String>,
}

pub fn score_cmd(ctx: &Context) -> Result<(), CliError> {
    let config = ctx.config();
    let corpus = corpus_path(config)?;
    let assessment = config.assessment_path();
    require_file(&assessment, "assessment set (run `build-assessment` first or set assessment.path)")?;
    let checkpoint = config.output(CHECKPOINT);
    let previous = Checkpoint::load(&checkpoint)?;
    if previous.is_some() && !ctx.resume {
        return Err(CliError::Config(format!(
            "an interrupted run left {}; pass --resume to continue it",
            checkpoint.display()
        )));
    }
    if let Some(c) = &previous {
        log::info!("resuming: {} of {} probes were complete", c.completed.len(), c.total);
    }
    let samples = load_pool(config, &corpus)?;
    let items = load_assessment(&assessment)?;
    let session = open_session(ctx, &samples, &items)?;
    let expected = expected_calls(samples.len(), items.len(), config.scoring.random_draws);
    log::info!(
        "scoring {} samples against {} items; a cold run issues {expected} backend calls",
        samples.len(),
        items.len()
    );
    let options = PoolOptions {
        checkpoint: Some(&checkpoint),
        concurrency: config.backend.max_concurrency,
    };
    let result = score_pool(&session, &samples, &items, &config.scoring, &options);
    let mut details = ScoreDetails {
        samples: samples.len(),
        items: items.len(),
        random_draws: config.scoring.random_draws,
        expected_cold_calls: expected,
        resumed_from: previous.map(|c| json!({"completed": c.completed.len(), "total": c.total})),
        error: None,
    };
    let scores = match result {
        Ok(s) => s,
        Err(e) => {
            details.error = Some(e.to_string());
            let outputs = if checkpoint.exists() { vec![checkpoint.clone()] } else { Vec::new() };
            write_manifest(&ctx.resolved, "score", "incomplete", Some(session.accounting()), outputs, &details)?;
            return Err(e.into());
        }
    };
    let hash = config.run_hash("score");
    let outputs = vec![
        config.output(SCORES),
        config.output(GLOBAL_SCORES),
        config.output("scores.csv"),
        config.output("global_scores.csv"),
    ];
    write_jsonl(&outputs[0], &scores.records, &hash)?;
    write_jsonl(&outputs[1], &scores.globals, &hash)?;
    let mut buf = Vec::new();
    write_records_csv(&mut buf, &scores.records)?;
    write_csv(&outputs[2], &buf, &hash)?;
    buf.clear();
    write_globals_csv(&mut buf, &scores.globals)?;
    write_csv(&outputs[3], &buf, &hash)?;
    let acct = session.accounting();
    write_manifest(&ctx.resolved, "score", "complete", Some(acct), outputs, &details)?;
    eprintln!(
        "scored {} pairs; {} backend calls, {} cache hits",
        scores.records.len(),
        acct.backend_calls,
        acct.cache_hits
    );
    Ok(())
}

#[derive(Serialize)]
struct SelectedId<'a> {
    position: usize,
    sample_id: &'a str,
}

pub fn select_cmd(ctx: &Context, method: &str) -> Result<(), CliError> {
    let config = ctx.config();
    let k = config.selection.k_percent;
    let baseline = match method {
        "icon" => None,
        other => Some(other.parse::<BaselineMethod>()?),
    };
    let (samples, items) = model_inputs(config)?;
    let mut accounting = None;
    let ids = match baseline {
        None => select_top_k(&read_globals(config)?, k)?,
        Some(BaselineMethod::Random) => baseline_select(&samples, None, BaselineMethod::Random, k, config.selection.seed)?,
        Some(m) => {
            let session = open_session(ctx, &samples, &items)?;
            let ppls: HashMap<String, f64> =
                response_ppls(&session, &samples, config.scoring.query_template, config.backend.max_concurrency)?;
            accounting = Some(session.accounting());
            baseline_select(&samples, Some(&ppls), m, k, config.selection.seed)?
        }
    };
    let stem = format!("selected_{method}_k{k}");
    let export = config.output(&format!("{stem}.json"));
    let listing = config.output(&format!("{stem}_ids.jsonl"));
    fs::create_dir_all(&config.paths.output_dir).map_err(|e| CliError::io(&config.paths.output_dir, e))?;
    export_subset(&samples, &ids, &export, CorpusFormat::AlpacaJson)?;
    let rows: Vec<SelectedId> = ids
        .iter()
        .enumerate()
        .map(|(i, id)| SelectedId { position: i + 1, sample_id: id })
        .collect();
    write_jsonl(&listing, &rows, &config.run_hash("select"))?;
    let details = json!({"method": method, "k_percent": k, "pool_size": samples.len(), "selected": ids.len()});
    write_manifest(&ctx.resolved, "select", "complete", accounting, vec![export.clone(), listing], details)?;
    eprintln!("selected {} of {} samples into {}", ids.len(), samples.len(), export.display());
    Ok(())
}

pub fn train_selector_cmd(ctx: &Context) -> Result<(), CliError> {
    let config = ctx.config();
    let globals = read_globals(config)?;
    let samples = load_pool(config, &corpus_path(config)?)?;
    let labeled = label_top_k(&globals, &config.selection)?;
    fs::create_dir_all(&config.paths.output_dir).map_err(|e| CliError::io(&config.paths.output_dir, e))?;
    let labeled_path = config.output("labeled.jsonl");
    let positives = export_labeled(&labeled, &samples, &labeled_path)?;
    let by_id: HashMap<&str, &Sample> = samples.iter().map(|s| (s.id.as_str(), s)).collect();
    let examples = labeled
        .iter()
        .map(|l| {
            by_id
                .get(l.sample_id.as_str())
                .map(|s| (*s, l.label == ctxsel_core::selection::Label::HighContribution))
                .ok_or_else(|| CliError::Data(format!("scored sample {} is not in the corpus", l.sample_id)))
        })
        .collect::<Result<Vec<_>, _>>()?;
    let model = train_selector(&examples, &config.selector.train_config(config.selection.k_percent))?;
    let model_path = config.output(SELECTOR);
    let mut value: Value = serde_json::from_str(&model.to_json()?)?;
    value["run_hash"] = Value::String(config.run_hash("train-selector"));
    write_file(&model_path, (serde_json::to_string_pretty(&value)? + "\n").as_bytes())?;
    let details = json!({
        "labeled": labeled.len(),
        "positives": positives,
        "n_train": model.metadata.n_train,
        "n_holdout": model.metadata.n_holdout,
        "holdout_accuracy": model.metadata.holdout_accuracy,
        "threshold": model.threshold,
    });
    write_manifest(&ctx.resolved, "train-selector", "complete", None, vec![labeled_path, model_path.clone()], details)?;
    match model.metadata.holdout_accuracy {
        Some(acc) => eprintln!("trained selector on {} samples; hold-out accuracy {acc:.4}", model.metadata.n_train),
        None => eprintln!("trained selector on {} samples; no hold-out split", model.metadata.n_train),
    }
    Ok(())
}

pub fn apply_selector_cmd(ctx: &Context, model_path: Option<&Path>) -> Result<(), CliError> {
    let config = ctx.config();
    let model_path = model_path.map(Path::to_path_buf).unwrap_or_else(|| config.output(SELECTOR));
    require_file(&model_path, "selector model (run `train-selector` first)")?;
    let model = SelectorModel::load(&model_path)?;
    let pool_path = match &config.paths.apply_pool {
        Some(p) => {
            require_file(p, "apply pool")?;
            p.clone()
        }
        None => corpus_path(config)?,
    };
    let pool = load_pool(config, &pool_path)?;
    let (scores, evaluations) = apply_selector(&model, &pool);
    let selected: Vec<String> = scores.iter().filter(|s| s.selected).map(|s| s.sample_id.clone()).collect();
    let scores_path = config.output("selector_scores.jsonl");
    let subset_path = config.output("selector_subset.json");
    write_jsonl(&scores_path, &scores, &config.run_hash("apply-selector"))?;
    export_subset(&pool, &selected, &subset_path, CorpusFormat::AlpacaJson)?;
    let details = json!({"pool_size": pool.len(), "evaluations": evaluations, "selected": selected.len()});
    write_manifest(
        &ctx.resolved,
        "apply-selector",
        "complete",
        Some(CallAccounting::default()),
        vec![scores_path, subset_path],
        details,
    )?;
    eprintln!("selector kept {} of {} samples; 0 backend calls", selected.len(), pool.len());
    Ok(())
}

#[derive(Serialize)]
struct AnalysisReport {
    #[serde(skip_serializing_if = "Option::is_none")]
    pairwise: Option<PairwiseReport>,
    distributions: Vec<DistributionReport>,
}

pub fn analyze_cmd(ctx: &Context) -> Result<(), CliError> {
    let config = ctx.config();
    let hash = config.run_hash("analyze");
    let mut report = AnalysisReport { pairwise: None, distributions: Vec::new() };
    let mut outputs = Vec::new();
    let mut accounting = None;

    if let Some(path) = &config.paths.judgments {
        require_file(path, "judgments")?;
        let judgments: Vec<JudgmentRecord> = read_jsonl(path).map_err(|e| CliError::io(path, e))?;
        report.pairwise = Some(pairwise_report(&judgments)?);
    }

    let globals_path = config.output(GLOBAL_SCORES);
    let mut selected: HashSet<String> = HashSet::new();
    if globals_path.is_file() {
        let globals = read_globals(config)?;
        selected = select_top_k(&globals, config.selection.k_percent)?.into_iter().collect();
        let values: Vec<(String, f64)> = globals.iter().map(|g| (g.sample_id.clone(), g.global_icon)).collect();
        report.distributions.push(distribution_report("global_icon", &values, &selected)?);
    }

    if config.analysis.ifd && config.paths.corpus.is_some() {
        let (samples, items) = model_inputs(config)?;
        let session = open_session(ctx, &samples, &items)?;
        let records = samples
            .iter()
            .map(|s| {
                Ok(DifficultyRecord {
                    sample_id: s.id.clone(),
                    ifd: ifd_score(&session, s, config.analysis.template)?,
                    selected: selected.contains(&s.id),
                })
            })
            .collect::<Result<Vec<_>, CliError>>()?;
        accounting = Some(session.accounting());
        let path = config.output("difficulty.jsonl");
        write_jsonl(&path, &records, &hash)?;
        outputs.push(path);
        if !selected.is_empty() {
            let values: Vec<(String, f64)> = records.iter().map(|r| (r.sample_id.clone(), r.ifd)).collect();
            report.distributions.push(distribution_report("ifd", &values, &selected)?);
        }
    }

    if report.pairwise.is_none() && report.distributions.is_empty() {
        return Err(CliError::Config(
            "nothing to analyze: set paths.judgments, run `score`, or enable analysis.ifd with a corpus".into(),
        ));
    }

    let mut text = format!("run {hash}\n\n");
    if let Some(p) = &report.pairwise {
        text.push_str(&format!(
            "pairwise: {} wins, {} ties, {} losses of {}; winning score {:.4}\n\n",
            p.wins, p.ties, p.losses, p.total, p.winning_score
        ));
    }
    for d in &report.distributions {
        text.push_str(&d.to_text());
        text.push('\n');
        let path = config.output(&format!("histogram_{}.csv", d.metric));
        write_csv(&path, d.histogram.to_csv().as_bytes(), &hash)?;
        outputs.push(path);
    }
    let json_path = config.output("report.json");
    let text_path = config.output("report.txt");
    write_json(&json_path, &report, &hash)?;
    write_file(&text_path, text.as_bytes())?;
    outputs.push(json_path);
    outputs.push(text_path);
    write_manifest(&ctx.resolved, "analyze", "complete", accounting, outputs, json!({}))?;
    eprint!("{text}");
    Ok(())
}

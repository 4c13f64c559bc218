//! Run configuration: a TOML file layered under environment variables and
//! command-line flags.

use std::collections::BTreeMap;
use std::fmt;
use std::path::{Path, PathBuf};

use ctxsel_core::corpus::{AssessmentSource, CorpusFormat};
use ctxsel_core::lm_backend::{BackendConfig, BackendKind};
use ctxsel_core::scoring::{ScoringConfig, Template};
use ctxsel_core::selection::{FeatureSpec, SelectionConfig, TrainConfig};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::CliError;

pub const ENV_PREFIX: &str = "CTXSEL_";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    #[serde(default = "BackendConfig::cache_lm")]
    pub backend: BackendConfig,
    #[serde(default)]
    pub scoring: ScoringConfig,
    #[serde(default)]
    pub selection: SelectionConfig,
    #[serde(default)]
    pub selector: SelectorConfig,
    #[serde(default)]
    pub assessment: AssessmentConfig,
    #[serde(default)]
    pub analysis: AnalysisConfig,
    #[serde(default)]
    pub paths: Paths,
    #[serde(default = "default_log_level")]
    pub log_level: String,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            backend: BackendConfig::cache_lm(),
            scoring: ScoringConfig::default(),
            selection: SelectionConfig::default(),
            selector: SelectorConfig::default(),
            assessment: AssessmentConfig::default(),
            analysis: AnalysisConfig::default(),
            paths: Paths::default(),
            log_level: default_log_level(),
        }
    }
}

fn default_log_level() -> String {
    "info".into()
}

/// Selector training options; K comes from `[selection]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SelectorConfig {
    pub seed: u64,
    pub epochs: usize,
    pub learning_rate: f64,
    pub l2: f64,
    pub holdout_fraction: f64,
    pub features: FeatureSpec,
}

impl Default for SelectorConfig {
    fn default() -> Self {
        let t = TrainConfig::default();
        SelectorConfig {
            seed: t.seed,
            epochs: t.epochs,
            learning_rate: t.learning_rate,
            l2: t.l2,
            holdout_fraction: t.holdout_fraction,
            features: t.features,
        }
    }
}

impl SelectorConfig {
    pub fn train_config(&self, k_percent: f64) -> TrainConfig {
        TrainConfig {
            k_percent,
            seed: self.seed,
            epochs: self.epochs,
            learning_rate: self.learning_rate,
            l2: self.l2,
            holdout_fraction: self.holdout_fraction,
            features: self.features,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AssessmentConfig {
    pub size: usize,
    pub seed: u64,
    pub sources: Vec<AssessmentSource>,
    /// Assessment JSONL read by `score`; `<output_dir>/assessment.jsonl`
    /// when unset.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub path: Option<PathBuf>,
}

impl Default for AssessmentConfig {
    fn default() -> Self {
        AssessmentConfig {
            size: 100,
            seed: 0,
            sources: Vec::new(),
            path: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AnalysisConfig {
    /// Compute instruction-following difficulty over the corpus.
    pub ifd: bool,
    pub template: Template,
}

impl Default for AnalysisConfig {
    fn default() -> Self {
        AnalysisConfig {
            ifd: true,
            template: Template::Alpaca,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Paths {
    #[serde(skip_serializing_if = "Option::is_none")]
    pub corpus: Option<PathBuf>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub corpus_format: Option<CorpusFormat>,
    pub output_dir: PathBuf,
    /// Persistent score cache; `<output_dir>/cache.jsonl` when unset.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub cache: Option<PathBuf>,
    /// Pool for `apply-selector`; the corpus when unset.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub apply_pool: Option<PathBuf>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub judgments: Option<PathBuf>,
}

impl Default for Paths {
    fn default() -> Self {
        Paths {
            corpus: None,
            corpus_format: None,
            output_dir: PathBuf::from("out"),
            cache: None,
            apply_pool: None,
            judgments: None,
        }
    }
}

impl RunConfig {
    pub fn output(&self, name: &str) -> PathBuf {
        self.paths.output_dir.join(name)
    }

    pub fn cache_path(&self) -> PathBuf {
        self.paths.cache.clone().unwrap_or_else(|| self.output("cache.jsonl"))
    }

    pub fn assessment_path(&self) -> PathBuf {
        self.assessment.path.clone().unwrap_or_else(|| self.output("assessment.jsonl"))
    }

    pub fn corpus_format(&self, path: &Path) -> CorpusFormat {
        self.paths.corpus_format.unwrap_or_else(|| CorpusFormat::infer(path))
    }

    /// Hash of everything that determines a command's outputs: the config
    /// values and the contents of its input files. File locations, the
    /// cache, the log level and request scheduling (concurrency, retries,
    /// timeouts) are left out.
    pub fn run_hash(&self, command: &str) -> String {
        let mut snapshot = self.clone();
        let mut inputs: Vec<(String, Option<PathBuf>)> = vec![
            ("corpus".into(), snapshot.paths.corpus.take()),
            ("apply_pool".into(), snapshot.paths.apply_pool.take()),
            ("judgments".into(), snapshot.paths.judgments.take()),
            ("assessment".into(), Some(self.assessment_path())),
            ("params".into(), snapshot.backend.params_path.take()),
            ("control_vocab".into(), snapshot.backend.control_vocab_path.take()),
        ];
        for (i, src) in snapshot.assessment.sources.iter_mut().enumerate() {
            inputs.push((format!("source{i}"), Some(std::mem::take(&mut src.path))));
        }
        snapshot.assessment.path = None;
        snapshot.paths.output_dir = PathBuf::new();
        snapshot.paths.cache = None;
        snapshot.log_level = String::new();
        let defaults = BackendConfig::cache_lm();
        snapshot.backend.max_concurrency = defaults.max_concurrency;
        snapshot.backend.retry_limit = defaults.retry_limit;
        snapshot.backend.timeout_secs = defaults.timeout_secs;
        snapshot.backend.backoff_ms = defaults.backoff_ms;
        let json = serde_json::to_string(&snapshot).expect("config serializes");
        let mut h = Sha256::new();
        h.update(command.as_bytes());
        h.update([0]);
        h.update(json.as_bytes());
        for (role, path) in inputs {
            let digest = path
                .and_then(|p| std::fs::read(p).ok())
                .map(|bytes| hex::encode(Sha256::digest(bytes)));
            h.update(format!("\n{role}={}", digest.as_deref().unwrap_or("-")).as_bytes());
        }
        hex::encode(h.finalize())
    }

    pub fn validate(&self) -> Result<(), CliError> {
        self.backend.validate()?;
        self.scoring.validate()?;
        ctxsel_core::selection::subset_size(1, self.selection.k_percent)?;
        if !(0.0..1.0).contains(&self.selector.holdout_fraction) {
            return Err(CliError::Config(format!(
                "selector.holdout_fraction must be in [0, 1), got {}",
                self.selector.holdout_fraction
            )));
        }
        Ok(())
    }

    fn resolve_relative(&mut self, base: &Path) {
        let fix = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        let fix_opt = |p: &mut Option<PathBuf>| {
            if let Some(p) = p {
                if p.is_relative() {
                    *p = base.join(&*p);
                }
            }
        };
        fix(&mut self.paths.output_dir);
        fix_opt(&mut self.paths.corpus);
        fix_opt(&mut self.paths.cache);
        fix_opt(&mut self.paths.apply_pool);
        fix_opt(&mut self.paths.judgments);
        fix_opt(&mut self.assessment.path);
        fix_opt(&mut self.backend.params_path);
        fix_opt(&mut self.backend.control_vocab_path);
        for s in &mut self.assessment.sources {
            fix(&mut s.path);
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum Source {
    Flag,
    Env,
    File,
    Default,
}

impl fmt::Display for Source {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Source::Flag => "flag",
            Source::Env => "env",
            Source::File => "file",
            Source::Default => "default",
        })
    }
}

/// Values supplied on the command line for overridable keys.
#[derive(Debug, Clone, Default)]
pub struct Overrides {
    pub seed: Option<u64>,
    pub output_dir: Option<PathBuf>,
    pub backend: Option<BackendKind>,
    pub concurrency: Option<usize>,
    pub log_level: Option<String>,
    pub k_percent: Option<f64>,
}

/// The layered config plus where each overridable key came from.
#[derive(Debug, Clone)]
pub struct Resolved {
    pub config: RunConfig,
    pub config_path: Option<PathBuf>,
    pub sources: BTreeMap<String, (String, Source)>,
}

impl Resolved {
    pub fn describe(&self) -> String {
        let mut out = String::from("effective settings (flag > env > file > default):\n");
        if let Some(p) = &self.config_path {
            out.push_str(&format!("  config file = {}\n", p.display()));
        }
        for (key, (value, source)) in &self.sources {
            out.push_str(&format!("  {key} = {value} [{source}]\n"));
        }
        out
    }
}

fn env_value<T: std::str::FromStr>(
    env: &dyn Fn(&str) -> Option<String>,
    name: &str,
) -> Result<Option<T>, CliError>
where
    T::Err: fmt::Display,
{
    let var = format!("{ENV_PREFIX}{name}");
    match env(&var).filter(|v| !v.is_empty()) {
        Some(raw) => raw
            .parse()
            .map(Some)
            .map_err(|e| CliError::Config(format!("{var}={raw:?}: {e}"))),
        None => Ok(None),
    }
}

/// Picks flag, then env, then reports whether the file set the key.
fn layer<T: Clone>(flag: Option<T>, env: Option<T>, in_file: bool) -> (Option<T>, Source) {
    match (flag, env) {
        (Some(v), _) => (Some(v), Source::Flag),
        (None, Some(v)) => (Some(v), Source::Env),
        (None, None) => (None, if in_file { Source::File } else { Source::Default }),
    }
}

fn file_has(table: &toml::Table, dotted: &str) -> bool {
    let mut parts = dotted.split('.').peekable();
    let mut current = table;
    while let Some(part) = parts.next() {
        match current.get(part) {
            Some(toml::Value::Table(t)) if parts.peek().is_some() => current = t,
            Some(_) => return parts.peek().is_none(),
            None => return false,
        }
    }
    false
}

/// Loads `config_path` (if any) and applies environment and flag overrides.
pub fn resolve(
    config_path: Option<&Path>,
    flags: &Overrides,
    env: &dyn Fn(&str) -> Option<String>,
) -> Result<Resolved, CliError> {
    let (table, mut config) = match config_path {
        Some(path) => {
            let text = std::fs::read_to_string(path)
                .map_err(|e| CliError::Config(format!("cannot read config {}: {e}", path.display())))?;
            let table: toml::Table =
                toml::from_str(&text).map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?;
            let mut config: RunConfig = toml::Value::Table(table.clone())
                .try_into()
                .map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?;
            let base = path.parent().map(Path::to_path_buf).unwrap_or_default();
            config.resolve_relative(&base);
            (table, config)
        }
        None => (toml::Table::new(), RunConfig::default()),
    };
    let mut sources = BTreeMap::new();

    let seed_keys = ["scoring.random_seed", "selection.seed", "selector.seed", "assessment.seed"];
    let (seed, src) = layer(flags.seed, env_value(env, "SEED")?, false);
    match seed {
        Some(s) => {
            config.scoring.random_seed = s;
            config.selection.seed = s;
            config.selector.seed = s;
            config.assessment.seed = s;
            for k in seed_keys {
                sources.insert(k.to_string(), (s.to_string(), src));
            }
        }
        None => {
            let values = [
                config.scoring.random_seed,
                config.selection.seed,
                config.selector.seed,
                config.assessment.seed,
            ];
            for (k, v) in seed_keys.iter().zip(values) {
                let s = if file_has(&table, k) { Source::File } else { Source::Default };
                sources.insert(k.to_string(), (v.to_string(), s));
            }
        }
    }

    let (dir, src) = layer(
        flags.output_dir.clone(),
        env_value::<PathBuf>(env, "OUTPUT_DIR")?,
        file_has(&table, "paths.output_dir"),
    );
    if let Some(d) = dir {
        config.paths.output_dir = d;
    }
    sources.insert("paths.output_dir".into(), (config.paths.output_dir.display().to_string(), src));

    let (kind, src) = layer(flags.backend, env_value(env, "BACKEND")?, file_has(&table, "backend.kind"));
    if let Some(k) = kind {
        config.backend.kind = k;
    }
    let kind_name = match config.backend.kind {
        BackendKind::Remote => "remote",
        BackendKind::CacheLm => "cache-lm",
    };
    sources.insert("backend.kind".into(), (kind_name.into(), src));

    let (conc, src) = layer(
        flags.concurrency,
        env_value(env, "CONCURRENCY")?,
        file_has(&table, "backend.max_concurrency"),
    );
    if let Some(c) = conc {
        config.backend.max_concurrency = c;
    }
    if config.backend.max_concurrency == 0 {
        return Err(CliError::Config("concurrency must be at least 1".into()));
    }
    sources.insert("backend.max_concurrency".into(), (config.backend.max_concurrency.to_string(), src));

    let (k, src) = layer(flags.k_percent, env_value(env, "K_PERCENT")?, file_has(&table, "selection.k_percent"));
    if let Some(k) = k {
        config.selection.k_percent = k;
    }
    sources.insert("selection.k_percent".into(), (config.selection.k_percent.to_string(), src));

    let (level, src) = layer(flags.log_level.clone(), env_value(env, "LOG_LEVEL")?, file_has(&table, "log_level"));
    if let Some(l) = level {
        config.log_level = l;
    }
    sources.insert("log_level".into(), (config.log_level.clone(), src));

    config.validate()?;
    Ok(Resolved {
        config,
        config_path: config_path.map(Path::to_path_buf),
        sources,
    })
}

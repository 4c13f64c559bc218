//! Candidate pools and assessment sets.
//!
//! Two input formats are understood: Alpaca-style JSON arrays
//! (`instruction` / `input` / `output`) and generic JSONL with one record per
//! line (`id?`, `instruction`, `input?`, `response`, `source?`). Records are
//! mapped to [`Sample`]s; assessment items are drawn from tagged sources with
//! equal stratification and a fixed seed.

use std::collections::{BTreeMap, HashMap, HashSet};
use std::fs;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use rand::seq::index;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::CorpusError;

/// Join used between the instruction and the optional input when forming a
/// full prompt.
pub const INPUT_SEPARATOR: &str = "\n\n";

/// One instruction-tuning record.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Sample {
    pub id: String,
    pub instruction: String,
    /// `None` and the empty string are the same state; constructors always
    /// canonicalize to `None`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub input: Option<String>,
    pub response: String,
    pub source: String,
}

impl Sample {
    pub fn new(
        id: impl Into<String>,
        instruction: impl Into<String>,
        input: Option<String>,
        response: impl Into<String>,
        source: impl Into<String>,
    ) -> Result<Self, CorpusError> {
        let sample = Sample {
            id: id.into(),
            instruction: instruction.into(),
            input: canonical_input(input),
            response: response.into(),
            source: source.into(),
        };
        if sample.instruction.trim().is_empty() {
            return Err(CorpusError::InvalidRecord {
                index: None,
                reason: format!("sample {} has an empty instruction", sample.id),
            });
        }
        if sample.response.trim().is_empty() {
            return Err(CorpusError::InvalidRecord {
                index: None,
                reason: format!("sample {} has an empty response", sample.id),
            });
        }
        Ok(sample)
    }

    /// Instruction followed by the input (when present).
    pub fn prompt(&self) -> String {
        full_prompt(&self.instruction, self.input.as_deref())
    }

    /// Flattened text used for feature extraction.
    pub fn full_text(&self) -> String {
        format!("{}\n{}", self.prompt(), self.response)
    }

    pub fn content_hash(&self) -> String {
        content_hash(&self.prompt(), &self.response)
    }
}

fn canonical_input(input: Option<String>) -> Option<String> {
    input.filter(|s| !s.is_empty())
}

pub fn full_prompt(instruction: &str, input: Option<&str>) -> String {
    match input {
        Some(input) if !input.is_empty() => format!("{instruction}{INPUT_SEPARATOR}{input}"),
        _ => instruction.to_string(),
    }
}

/// SHA-256 over the length-prefixed (prompt, reference) pair, hex encoded.
pub fn content_hash(prompt: &str, reference: &str) -> String {
    let mut hasher = Sha256::new();
    hasher.update((prompt.len() as u64).to_le_bytes());
    hasher.update(prompt.as_bytes());
    hasher.update(reference.as_bytes());
    hex::encode(hasher.finalize())
}

/// One held-out evaluation record.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AssessmentItem {
    pub id: String,
    pub prompt: String,
    pub reference: String,
    pub source: String,
    /// Filled once a backend has tokenized the reference.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub reference_token_count: Option<usize>,
}

impl AssessmentItem {
    pub fn from_sample(sample: &Sample) -> Self {
        AssessmentItem {
            id: sample.id.clone(),
            prompt: sample.prompt(),
            reference: sample.response.clone(),
            source: sample.source.clone(),
            reference_token_count: None,
        }
    }

    pub fn content_hash(&self) -> String {
        content_hash(&self.prompt, &self.reference)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum CorpusFormat {
    AlpacaJson,
    Jsonl,
}

impl CorpusFormat {
    /// `.jsonl` means JSONL, anything else is treated as an Alpaca array.
    pub fn infer(path: &Path) -> Self {
        match path.extension().and_then(|e| e.to_str()) {
            Some("jsonl") => CorpusFormat::Jsonl,
            _ => CorpusFormat::AlpacaJson,
        }
    }
}

impl std::str::FromStr for CorpusFormat {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "alpaca-json" | "alpaca" | "json" => Ok(CorpusFormat::AlpacaJson),
            "jsonl" => Ok(CorpusFormat::Jsonl),
            other => Err(format!("unknown corpus format {other:?} (expected alpaca-json or jsonl)")),
        }
    }
}

#[derive(Debug, Deserialize)]
struct AlpacaRecord {
    instruction: String,
    #[serde(default)]
    input: Option<String>,
    output: String,
}

#[derive(Debug, Serialize)]
struct AlpacaOut<'a> {
    instruction: &'a str,
    input: &'a str,
    output: &'a str,
}

#[derive(Debug, Deserialize)]
struct JsonlRecord {
    #[serde(default)]
    id: Option<String>,
    instruction: String,
    #[serde(default)]
    input: Option<String>,
    response: String,
    #[serde(default)]
    source: Option<String>,
}

fn source_name(path: &Path) -> String {
    path.file_stem()
        .and_then(|s| s.to_str())
        .unwrap_or("corpus")
        .to_string()
}

fn ordinal_id(source: &str, index: usize) -> String {
    format!("{source}-{index:06}")
}

/// Loads a corpus, naming records after the file stem.
pub fn load_corpus(path: &Path, format: CorpusFormat) -> Result<Vec<Sample>, CorpusError> {
    load_corpus_tagged(path, format, None)
}

/// Loads a corpus, overriding every record's source tag when `tag` is given.
pub fn load_corpus_tagged(
    path: &Path,
    format: CorpusFormat,
    tag: Option<&str>,
) -> Result<Vec<Sample>, CorpusError> {
    let text = fs::read_to_string(path).map_err(|source| CorpusError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    let default_source = tag.map(str::to_string).unwrap_or_else(|| source_name(path));
    let samples = match format {
        CorpusFormat::AlpacaJson => parse_alpaca(&text, &default_source)?,
        CorpusFormat::Jsonl => parse_jsonl(&text, &default_source, tag.is_some())?,
    };
    check_unique_ids(&samples)?;
    log::info!("loaded {} samples from {}", samples.len(), path.display());
    Ok(samples)
}

fn byte_offset(text: &str, line: usize, column: usize) -> usize {
    let line_start: usize = text
        .split_inclusive('\n')
        .take(line.saturating_sub(1))
        .map(str::len)
        .sum();
    line_start + column.saturating_sub(1)
}

fn parse_alpaca(text: &str, source: &str) -> Result<Vec<Sample>, CorpusError> {
    let values: Vec<serde_json::Value> = serde_json::from_str(text).map_err(|e| CorpusError::Parse {
        offset: byte_offset(text, e.line(), e.column()),
        index: None,
        reason: e.to_string(),
    })?;
    values
        .into_iter()
        .enumerate()
        .map(|(index, value)| {
            let record: AlpacaRecord = serde_json::from_value(value).map_err(|e| CorpusError::Parse {
                offset: 0,
                index: Some(index),
                reason: e.to_string(),
            })?;
            Sample::new(
                ordinal_id(source, index),
                record.instruction,
                record.input,
                record.output,
                source,
            )
            .map_err(|e| e.at_index(index))
        })
        .collect()
}

fn parse_jsonl(text: &str, source: &str, force_source: bool) -> Result<Vec<Sample>, CorpusError> {
    let mut samples = Vec::new();
    let mut offset = 0;
    let mut index = 0;
    for line in text.split_inclusive('\n') {
        let line_offset = offset;
        offset += line.len();
        if line.trim().is_empty() {
            continue;
        }
        let record: JsonlRecord = serde_json::from_str(line).map_err(|e| CorpusError::Parse {
            offset: line_offset + e.column().saturating_sub(1),
            index: Some(index),
            reason: e.to_string(),
        })?;
        let record_source = match (force_source, record.source) {
            (false, Some(s)) if !s.is_empty() => s,
            _ => source.to_string(),
        };
        let id = record.id.unwrap_or_else(|| ordinal_id(&record_source, index));
        samples.push(
            Sample::new(id, record.instruction, record.input, record.response, record_source)
                .map_err(|e| e.at_index(index))?,
        );
        index += 1;
    }
    Ok(samples)
}

fn check_unique_ids(samples: &[Sample]) -> Result<(), CorpusError> {
    let mut seen = HashSet::new();
    let mut duplicates = BTreeMap::new();
    for sample in samples {
        if !seen.insert(sample.id.as_str()) {
            duplicates.insert(sample.id.clone(), ());
        }
    }
    if duplicates.is_empty() {
        Ok(())
    } else {
        Err(CorpusError::DuplicateIds(duplicates.into_keys().collect()))
    }
}

/// Writes samples in the requested format. JSONL keeps ids and source tags;
/// Alpaca JSON restores the original field names and drops both.
pub fn save_corpus(samples: &[Sample], path: &Path, format: CorpusFormat) -> Result<(), CorpusError> {
    let io_err = |source| CorpusError::Io {
        path: path.to_path_buf(),
        source,
    };
    let file = fs::File::create(path).map_err(io_err)?;
    let mut out = BufWriter::new(file);
    match format {
        CorpusFormat::AlpacaJson => {
            let records: Vec<AlpacaOut> = samples
                .iter()
                .map(|s| AlpacaOut {
                    instruction: &s.instruction,
                    input: s.input.as_deref().unwrap_or(""),
                    output: &s.response,
                })
                .collect();
            serde_json::to_writer_pretty(&mut out, &records).map_err(CorpusError::Json)?;
            out.write_all(b"\n").map_err(io_err)?;
        }
        CorpusFormat::Jsonl => {
            for s in samples {
                serde_json::to_writer(&mut out, s).map_err(CorpusError::Json)?;
                out.write_all(b"\n").map_err(io_err)?;
            }
        }
    }
    out.flush().map_err(io_err)
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AssessmentSource {
    pub path: PathBuf,
    pub tag: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SourceCount {
    pub tag: String,
    pub available: usize,
    pub drawn: usize,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RecordHash {
    pub id: String,
    pub hash: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CorpusManifest {
    pub seed: u64,
    pub n_total: usize,
    pub sources: Vec<SourceCount>,
    pub records: Vec<RecordHash>,
}

/// Per-source quotas: an equal split with the remainder going to the
/// earliest-declared sources.
pub fn stratified_quotas(n_total: usize, n_sources: usize) -> Vec<usize> {
    if n_sources == 0 {
        return Vec::new();
    }
    let base = n_total / n_sources;
    let extra = n_total % n_sources;
    (0..n_sources).map(|i| base + usize::from(i < extra)).collect()
}

/// Draws an assessment set from already-loaded, tagged pools.
pub fn build_assessment_from(
    pools: &[(String, Vec<Sample>)],
    n_total: usize,
    seed: u64,
) -> Result<(Vec<AssessmentItem>, CorpusManifest), CorpusError> {
    if pools.is_empty() && n_total > 0 {
        return Err(CorpusError::NoSources);
    }
    let quotas = stratified_quotas(n_total, pools.len());
    let shortfalls: Vec<String> = pools
        .iter()
        .zip(&quotas)
        .filter(|((_, pool), &quota)| pool.len() < quota)
        .map(|((tag, pool), &quota)| {
            format!("{tag}: needs {quota}, has {} (short by {})", pool.len(), quota - pool.len())
        })
        .collect();
    if !shortfalls.is_empty() {
        return Err(CorpusError::QuotaShortfall(shortfalls.join("; ")));
    }

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut items = Vec::with_capacity(n_total);
    let mut sources = Vec::with_capacity(pools.len());
    let mut seen_ids = HashSet::new();
    for ((tag, pool), &quota) in pools.iter().zip(&quotas) {
        let mut picked = index::sample(&mut rng, pool.len(), quota).into_vec();
        picked.sort_unstable();
        for i in picked {
            let item = AssessmentItem::from_sample(&pool[i]);
            if !seen_ids.insert(item.id.clone()) {
                return Err(CorpusError::DuplicateIds(vec![item.id]));
            }
            items.push(item);
        }
        sources.push(SourceCount {
            tag: tag.clone(),
            available: pool.len(),
            drawn: quota,
        });
    }
    let records = items
        .iter()
        .map(|item| RecordHash {
            id: item.id.clone(),
            hash: item.content_hash(),
        })
        .collect();
    let manifest = CorpusManifest {
        seed,
        n_total,
        sources,
        records,
    };
    Ok((items, manifest))
}

/// Loads each tagged source and draws `n_total` items from them.
pub fn build_assessment(
    sources: &[AssessmentSource],
    n_total: usize,
    seed: u64,
) -> Result<(Vec<AssessmentItem>, CorpusManifest), CorpusError> {
    let mut pools = Vec::with_capacity(sources.len());
    for src in sources {
        let pool = load_corpus_tagged(&src.path, CorpusFormat::infer(&src.path), Some(&src.tag))?;
        if pool.is_empty() {
            return Err(CorpusError::EmptySource(src.tag.clone()));
        }
        pools.push((src.tag.clone(), pool));
    }
    build_assessment_from(&pools, n_total, seed)
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Collision {
    pub sample_id: String,
    pub assessment_id: String,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct DisjointReport {
    pub collisions: Vec<Collision>,
}

impl DisjointReport {
    pub fn is_disjoint(&self) -> bool {
        self.collisions.is_empty()
    }
}

/// Exact-match overlap between candidates and assessment items on the
/// canonical (prompt, reference) text. No case or whitespace folding.
pub fn check_disjoint(assessment: &[AssessmentItem], candidates: &[Sample]) -> DisjointReport {
    let mut by_text: HashMap<(&str, &str), Vec<&str>> = HashMap::new();
    for item in assessment {
        by_text
            .entry((item.prompt.as_str(), item.reference.as_str()))
            .or_default()
            .push(&item.id);
    }
    let mut collisions = Vec::new();
    for sample in candidates {
        let prompt = sample.prompt();
        if let Some(ids) = by_text.get(&(prompt.as_str(), sample.response.as_str())) {
            collisions.extend(ids.iter().map(|id| Collision {
                sample_id: sample.id.clone(),
                assessment_id: id.to_string(),
            }));
        }
    }
    DisjointReport { collisions }
}

#[derive(Serialize)]
struct AssessmentLine<'a> {
    id: &'a str,
    prompt: &'a str,
    reference: &'a str,
    source: &'a str,
}

pub fn save_assessment(items: &[AssessmentItem], path: &Path) -> Result<(), CorpusError> {
    let io_err = |source| CorpusError::Io {
        path: path.to_path_buf(),
        source,
    };
    let mut out = BufWriter::new(fs::File::create(path).map_err(io_err)?);
    for item in items {
        let line = AssessmentLine {
            id: &item.id,
            prompt: &item.prompt,
            reference: &item.reference,
            source: &item.source,
        };
        serde_json::to_writer(&mut out, &line).map_err(CorpusError::Json)?;
        out.write_all(b"\n").map_err(io_err)?;
    }
    out.flush().map_err(io_err)
}

pub fn load_assessment(path: &Path) -> Result<Vec<AssessmentItem>, CorpusError> {
    let text = fs::read_to_string(path).map_err(|source| CorpusError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    let mut items: Vec<AssessmentItem> = Vec::new();
    let mut offset = 0;
    for (index, line) in text.split_inclusive('\n').enumerate() {
        let line_offset = offset;
        offset += line.len();
        if line.trim().is_empty() {
            continue;
        }
        let item: AssessmentItem = serde_json::from_str(line).map_err(|e| CorpusError::Parse {
            offset: line_offset,
            index: Some(index),
            reason: e.to_string(),
        })?;
        if item.prompt.trim().is_empty() || item.reference.trim().is_empty() {
            return Err(CorpusError::InvalidRecord {
                index: Some(index),
                reason: format!("assessment item {} has an empty prompt or reference", item.id),
            });
        }
        items.push(item);
    }
    let mut seen = HashSet::new();
    let dups: Vec<String> = items
        .iter()
        .filter(|i| !seen.insert(i.id.as_str()))
        .map(|i| i.id.clone())
        .collect();
    if !dups.is_empty() {
        return Err(CorpusError::DuplicateIds(dups));
    }
    Ok(items)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample(id: &str, instruction: &str, input: Option<&str>, response: &str) -> Sample {
        Sample::new(id, instruction, input.map(str::to_string), response, "t").unwrap()
    }

    fn write(dir: &Path, name: &str, text: &str) -> PathBuf {
        let path = dir.join(name);
        fs::write(&path, text).unwrap();
        path
    }

    #[test]
    fn empty_input_is_absent() {
        let s = sample("a", "Say hi", Some(""), "hi");
        assert_eq!(s.input, None);
        assert_eq!(s.prompt(), "Say hi");
        let s = sample("b", "Add", Some("1 2"), "3");
        assert_eq!(s.prompt(), "Add\n\n1 2");
    }

    #[test]
    fn blank_fields_rejected() {
        assert!(Sample::new("a", "  ", None, "x", "t").is_err());
        assert!(Sample::new("a", "x", None, "\n", "t").is_err());
    }

    #[test]
    fn alpaca_ids_are_ordinals() {
        let dir = tempfile::tempdir().unwrap();
        let path = write(
            dir.path(),
            "alpaca_data.json",
            r#"[{"instruction":"a","input":"","output":"b"},{"instruction":"c","input":"d","output":"e"}]"#,
        );
        let samples = load_corpus(&path, CorpusFormat::AlpacaJson).unwrap();
        assert_eq!(samples.len(), 2);
        assert_eq!(samples[0].id, "alpaca_data-000000");
        assert_eq!(samples[1].id, "alpaca_data-000001");
        assert_eq!(samples[1].input.as_deref(), Some("d"));
        assert_eq!(samples[0].source, "alpaca_data");
    }

    #[test]
    fn empty_array_is_empty_corpus() {
        let dir = tempfile::tempdir().unwrap();
        let path = write(dir.path(), "e.json", "[]");
        assert!(load_corpus(&path, CorpusFormat::AlpacaJson).unwrap().is_empty());
    }

    #[test]
    fn missing_output_names_record() {
        let dir = tempfile::tempdir().unwrap();
        let path = write(
            dir.path(),
            "bad.json",
            r#"[{"instruction":"a","output":"b"},{"instruction":"c","input":""}]"#,
        );
        match load_corpus(&path, CorpusFormat::AlpacaJson) {
            Err(CorpusError::Parse { index: Some(1), reason, .. }) => assert!(reason.contains("output")),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn syntax_error_reports_offset() {
        let dir = tempfile::tempdir().unwrap();
        let path = write(dir.path(), "bad.json", "[\n{\"instruction\": }\n]");
        match load_corpus(&path, CorpusFormat::AlpacaJson) {
            Err(CorpusError::Parse { offset, index: None, .. }) => assert_eq!(offset, 18),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn jsonl_duplicates_listed() {
        let dir = tempfile::tempdir().unwrap();
        let path = write(
            dir.path(),
            "d.jsonl",
            concat!(
                "{\"id\":\"x\",\"instruction\":\"a\",\"response\":\"b\"}\n",
                "{\"id\":\"y\",\"instruction\":\"a\",\"response\":\"b\"}\n",
                "{\"id\":\"x\",\"instruction\":\"a\",\"response\":\"b\"}\n",
            ),
        );
        match load_corpus(&path, CorpusFormat::Jsonl) {
            Err(CorpusError::DuplicateIds(ids)) => assert_eq!(ids, vec!["x".to_string()]),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn jsonl_parse_error_names_line() {
        let dir = tempfile::tempdir().unwrap();
        let path = write(
            dir.path(),
            "d.jsonl",
            "{\"instruction\":\"a\",\"response\":\"b\"}\n{\"instruction\":\"a\"}\n",
        );
        match load_corpus(&path, CorpusFormat::Jsonl) {
            Err(CorpusError::Parse { index: Some(1), offset, .. }) => assert!(offset >= 36),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn quotas_spread_remainder_to_first_sources() {
        assert_eq!(stratified_quotas(1020, 3), vec![340, 340, 340]);
        assert_eq!(stratified_quotas(10, 3), vec![4, 3, 3]);
        assert_eq!(stratified_quotas(11, 3), vec![4, 4, 3]);
        assert_eq!(stratified_quotas(0, 3), vec![0, 0, 0]);
    }

    fn pool(tag: &str, n: usize) -> (String, Vec<Sample>) {
        let samples = (0..n)
            .map(|i| {
                Sample::new(
                    format!("{tag}-{i:06}"),
                    format!("{tag} question {i}"),
                    None,
                    format!("answer {i}"),
                    tag,
                )
                .unwrap()
            })
            .collect();
        (tag.to_string(), samples)
    }

    #[test]
    fn stratified_draw_is_deterministic() {
        let pools = vec![pool("a", 400), pool("b", 500), pool("c", 345)];
        let (items, manifest) = build_assessment_from(&pools, 1020, 7).unwrap();
        assert_eq!(items.len(), 1020);
        let drawn: Vec<usize> = manifest.sources.iter().map(|s| s.drawn).collect();
        assert_eq!(drawn, vec![340, 340, 340]);
        let (items2, manifest2) = build_assessment_from(&pools, 1020, 7).unwrap();
        assert_eq!(items, items2);
        assert_eq!(
            serde_json::to_vec(&manifest).unwrap(),
            serde_json::to_vec(&manifest2).unwrap()
        );
        let (items3, _) = build_assessment_from(&pools, 1020, 8).unwrap();
        assert_ne!(items, items3);
    }

    #[test]
    fn zero_items_is_empty() {
        let pools = vec![pool("a", 3)];
        let (items, manifest) = build_assessment_from(&pools, 0, 1).unwrap();
        assert!(items.is_empty());
        assert!(manifest.records.is_empty());
    }

    #[test]
    fn shortfall_is_an_error() {
        let pools = vec![pool("a", 400), pool("b", 100), pool("c", 400)];
        match build_assessment_from(&pools, 1020, 7) {
            Err(CorpusError::QuotaShortfall(msg)) => assert!(msg.contains("b: needs 340, has 100")),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn disjointness_is_exact() {
        let candidates = vec![
            sample("s1", "Add", Some("1 2"), "3"),
            sample("s2", "add", Some("1 2"), "3"),
            sample("s3", "Add", Some("1  2"), "3"),
        ];
        let assessment = vec![AssessmentItem {
            id: "a1".into(),
            prompt: "Add\n\n1 2".into(),
            reference: "3".into(),
            source: "x".into(),
            reference_token_count: None,
        }];
        let report = check_disjoint(&assessment, &candidates);
        assert_eq!(
            report.collisions,
            vec![Collision {
                sample_id: "s1".into(),
                assessment_id: "a1".into()
            }]
        );
        assert!(check_disjoint(&assessment, &candidates[1..]).is_disjoint());
    }

    #[test]
    fn hash_depends_on_split_point() {
        assert_ne!(content_hash("ab", "c"), content_hash("a", "bc"));
    }
}

//! Append-only persistent cache of continuation log-probabilities.
//!
//! Each line of the cache file is one JSON record carrying the key fields,
//! tokens, logprobs and a creation timestamp. On load, later lines win over
//! earlier ones with the same key; a truncated final line (from an
//! interrupted write) is skipped.

use std::collections::HashMap;
use std::fs::{self, File, OpenOptions};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::sync::{Arc, Mutex, RwLock};
use std::time::{SystemTime, UNIX_EPOCH};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::TokenLogprobs;
use crate::error::BackendError;

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ScoreCacheKey {
    pub model_id: String,
    pub prompt_hash: String,
    pub continuation_hash: String,
}

impl ScoreCacheKey {
    pub fn new(model_id: &str, prompt: &str, continuation: &str) -> Self {
        ScoreCacheKey {
            model_id: model_id.to_string(),
            prompt_hash: sha256_hex(prompt),
            continuation_hash: sha256_hex(continuation),
        }
    }
}

fn sha256_hex(text: &str) -> String {
    hex::encode(Sha256::digest(text.as_bytes()))
}

#[derive(Debug, Serialize, Deserialize)]
struct CacheRecord {
    #[serde(flatten)]
    key: ScoreCacheKey,
    tokens: Vec<String>,
    logprobs: Vec<f64>,
    created_at: u64,
}

/// One slot per key, so concurrent lookups of the same key compute once.
type Slot = Arc<Mutex<Option<TokenLogprobs>>>;

#[derive(Debug, Default)]
pub struct ScoreCache {
    slots: RwLock<HashMap<ScoreCacheKey, Slot>>,
    log: Option<Mutex<LogFile>>,
}

#[derive(Debug)]
struct LogFile {
    path: PathBuf,
    writer: BufWriter<File>,
}

impl ScoreCache {
    pub fn in_memory() -> Self {
        Self::default()
    }

    /// Opens (or creates) a cache file and loads every complete record.
    pub fn open(path: &Path) -> Result<Self, BackendError> {
        let cache_err = |source| BackendError::Cache {
            path: path.to_path_buf(),
            source,
        };
        let mut slots = HashMap::new();
        if path.exists() {
            let text = fs::read_to_string(path).map_err(cache_err)?;
            let mut skipped = 0usize;
            for line in text.lines().filter(|l| !l.trim().is_empty()) {
                let parsed = serde_json::from_str::<CacheRecord>(line)
                    .ok()
                    .and_then(|r| TokenLogprobs::new(r.tokens, r.logprobs).ok().map(|v| (r.key, v)));
                match parsed {
                    Some((key, value)) => {
                        slots.insert(key, Arc::new(Mutex::new(Some(value))));
                    }
                    None => skipped += 1,
                }
            }
            if skipped > 0 {
                log::warn!("skipped {skipped} unreadable record(s) in cache {}", path.display());
            }
        } else if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
            fs::create_dir_all(parent).map_err(cache_err)?;
        }
        let mut file = OpenOptions::new().create(true).append(true).open(path).map_err(cache_err)?;
        // A torn final line would otherwise swallow the next record.
        if let Ok(meta) = file.metadata() {
            if meta.len() > 0 && !fs::read(path).map(|b| b.ends_with(b"\n")).unwrap_or(true) {
                file.write_all(b"\n").map_err(cache_err)?;
            }
        }
        Ok(ScoreCache {
            slots: RwLock::new(slots),
            log: Some(Mutex::new(LogFile {
                path: path.to_path_buf(),
                writer: BufWriter::new(file),
            })),
        })
    }

    pub fn len(&self) -> usize {
        self.slots
            .read()
            .unwrap()
            .values()
            .filter(|slot| slot.lock().unwrap().is_some())
            .count()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn get(&self, key: &ScoreCacheKey) -> Option<TokenLogprobs> {
        let slot = self.slots.read().unwrap().get(key).cloned()?;
        let value = slot.lock().unwrap().clone();
        value
    }

    fn slot(&self, key: &ScoreCacheKey) -> Slot {
        if let Some(slot) = self.slots.read().unwrap().get(key) {
            return slot.clone();
        }
        self.slots.write().unwrap().entry(key.clone()).or_default().clone()
    }

    /// Returns the cached value or runs `compute` exactly once for this key
    /// (concurrent callers wait on the first). The flag reports a hit.
    pub fn get_or_compute<F>(&self, key: &ScoreCacheKey, compute: F) -> Result<(TokenLogprobs, bool), BackendError>
    where
        F: FnOnce() -> Result<TokenLogprobs, BackendError>,
    {
        let slot = self.slot(key);
        let mut guard = slot.lock().unwrap();
        if let Some(value) = guard.as_ref() {
            return Ok((value.clone(), true));
        }
        let value = compute()?;
        self.append(key, &value)?;
        *guard = Some(value.clone());
        Ok((value, false))
    }

    fn append(&self, key: &ScoreCacheKey, value: &TokenLogprobs) -> Result<(), BackendError> {
        let Some(log) = &self.log else {
            return Ok(());
        };
        let record = CacheRecord {
            key: key.clone(),
            tokens: value.tokens.clone(),
            logprobs: value.logprobs.clone(),
            created_at: SystemTime::now()
                .duration_since(UNIX_EPOCH)
                .map(|d| d.as_secs())
                .unwrap_or(0),
        };
        let mut line = serde_json::to_vec(&record).map_err(|e| BackendError::Malformed(e.to_string()))?;
        line.push(b'\n');
        let mut log = log.lock().unwrap();
        let LogFile { path, writer } = &mut *log;
        writer
            .write_all(&line)
            .and_then(|_| writer.flush())
            .map_err(|source| BackendError::Cache {
                path: path.clone(),
                source,
            })
    }
}

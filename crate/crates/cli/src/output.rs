//! Output writers. Every JSON and JSONL artifact carries the run hash; CSV
//! files start with a `# run <hash>` comment line.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use ctxsel_core::lm_backend::CallAccounting;
use serde::Serialize;
use serde_json::Value;

use crate::config::Resolved;
use crate::error::CliError;

pub fn write_file(path: &Path, bytes: &[u8]) -> Result<(), CliError> {
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent).map_err(|e| CliError::io(parent, e))?;
    }
    fs::write(path, bytes).map_err(|e| CliError::io(path, e))
}

fn tagged<T: Serialize>(item: &T, run_hash: &str) -> Result<Value, CliError> {
    let mut value = serde_json::to_value(item)?;
    if let Value::Object(map) = &mut value {
        map.insert("run_hash".into(), Value::String(run_hash.into()));
    }
    Ok(value)
}

pub fn write_jsonl<T: Serialize>(path: &Path, items: &[T], run_hash: &str) -> Result<(), CliError> {
    let mut buf = Vec::new();
    for item in items {
        serde_json::to_writer(&mut buf, &tagged(item, run_hash)?)?;
        buf.push(b'\n');
    }
    write_file(path, &buf)
}

pub fn write_json<T: Serialize>(path: &Path, item: &T, run_hash: &str) -> Result<(), CliError> {
    let mut text = serde_json::to_string_pretty(&tagged(item, run_hash)?)?;
    text.push('\n');
    write_file(path, text.as_bytes())
}

pub fn write_csv(path: &Path, body: &[u8], run_hash: &str) -> Result<(), CliError> {
    let mut buf = Vec::with_capacity(body.len() + 80);
    writeln!(buf, "# run {run_hash}").expect("write to Vec");
    buf.extend_from_slice(body);
    write_file(path, &buf)
}

#[derive(Debug, Serialize)]
pub struct Manifest<'a, D: Serialize> {
    pub command: &'a str,
    pub run_hash: &'a str,
    pub status: &'a str,
    pub version: &'a str,
    pub created_at: u64,
    pub config_file: Option<&'a Path>,
    pub config: &'a crate::config::RunConfig,
    pub settings: Vec<SettingLine<'a>>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub accounting: Option<CallAccounting>,
    pub outputs: Vec<PathBuf>,
    pub details: D,
}

#[derive(Debug, Serialize)]
pub struct SettingLine<'a> {
    pub key: &'a str,
    pub value: &'a str,
    pub source: crate::config::Source,
}

/// Writes `<output_dir>/<command>_manifest.json`.
pub fn write_manifest<D: Serialize>(
    resolved: &Resolved,
    command: &str,
    status: &str,
    accounting: Option<CallAccounting>,
    outputs: Vec<PathBuf>,
    details: D,
) -> Result<PathBuf, CliError> {
    let config = &resolved.config;
    let run_hash = config.run_hash(command);
    let manifest = Manifest {
        command,
        run_hash: &run_hash,
        status,
        version: env!("CARGO_PKG_VERSION"),
        created_at: SystemTime::now().duration_since(UNIX_EPOCH).map(|d| d.as_secs()).unwrap_or(0),
        config_file: resolved.config_path.as_deref(),
        config,
        settings: resolved
            .sources
            .iter()
            .map(|(key, (value, source))| SettingLine { key, value, source: *source })
            .collect(),
        accounting,
        outputs,
        details,
    };
    let path = config.output(&format!("{}_manifest.json", command.replace('-', "_")));
    let mut text = serde_json::to_string_pretty(&manifest)?;
    text.push('\n');
    write_file(&path, text.as_bytes())?;
    Ok(path)
}

//! Per-run provenance: `config.json` plus `manifest.json`, which holds one
//! entry per command run in the directory.

use std::path::{Path, PathBuf};

use serde_json::{json, Map, Value};
use sha2::{Digest, Sha256};

use crate::config::RunConfig;
use crate::error::{CliError, Result};

pub const MANIFEST_FILE: &str = "manifest.json";
pub const CONFIG_FILE: &str = "config.json";

pub fn sha256_hex(bytes: &[u8]) -> String {
    format!("{:x}", Sha256::digest(bytes))
}

/// Hash over the canonical config JSON and every input file, each framed by
/// its name and length.
pub fn input_hash(cfg: &RunConfig, inputs: &[(String, Vec<u8>)]) -> Result<String> {
    let mut h = Sha256::new();
    let config = serde_json::to_vec(cfg)?;
    for (name, bytes) in std::iter::once(("config".to_string(), config)).chain(inputs.iter().cloned()) {
        h.update(name.as_bytes());
        h.update([0u8]);
        h.update((bytes.len() as u64).to_le_bytes());
        h.update(&bytes);
    }
    Ok(format!("{:x}", h.finalize()))
}

pub fn write_json(path: &Path, value: &impl serde::Serialize) -> Result<()> {
    let mut bytes = serde_json::to_vec_pretty(value)?;
    bytes.push(b'\n');
    std::fs::write(path, bytes).map_err(|e| CliError::io(path, e))
}

pub fn file_digest(path: &Path) -> Result<Value> {
    let bytes = std::fs::read(path).map_err(|e| CliError::io(path, e))?;
    Ok(json!({
        "path": path.file_name().map(|f| f.to_string_lossy().into_owned()),
        "sha256": sha256_hex(&bytes),
        "bytes": bytes.len(),
    }))
}

pub struct Entry {
    pub command: &'static str,
    pub input_hash: String,
    pub inputs: Vec<String>,
    pub artifacts: Vec<PathBuf>,
    pub extra: Map<String, Value>,
}

/// Writes the config copy and merges `entry` into the manifest.
pub fn record(out: &Path, cfg: &RunConfig, entry: Entry) -> Result<()> {
    write_json(&out.join(CONFIG_FILE), cfg)?;
    let path = out.join(MANIFEST_FILE);
    let mut manifest: Map<String, Value> = match std::fs::read(&path) {
        Ok(b) => serde_json::from_slice(&b).unwrap_or_default(),
        Err(_) => Map::new(),
    };
    manifest.insert("schema".into(), json!(1));
    let mut e = Map::new();
    e.insert("config".into(), serde_json::to_value(cfg)?);
    e.insert("input_hash".into(), json!(entry.input_hash));
    e.insert("inputs".into(), json!(entry.inputs));
    let artifacts = entry
        .artifacts
        .iter()
        .map(|a| file_digest(a))
        .collect::<Result<Vec<_>>>()?;
    e.insert("artifacts".into(), Value::Array(artifacts));
    e.extend(entry.extra);
    let commands = manifest.entry("commands").or_insert_with(|| Value::Object(Map::new()));
    if let Value::Object(c) = commands {
        c.insert(entry.command.into(), Value::Object(e));
    }
    write_json(&path, &manifest)
}

//! TOML experiment configuration with `--set key=value` overrides.
//!
//! Every config has three shared keys (`seed`, `trials`, `output_dir`); the
//! remaining keys are parsed into the command's own schema, which rejects
//! unknown keys.

use std::path::{Path, PathBuf};

use serde::de::DeserializeOwned;
use serde::Serialize;
use sha2::{Digest, Sha256};

use crate::error::{LabError, LabResult};

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Common {
    pub seed: u64,
    pub trials: usize,
    pub output_dir: PathBuf,
}

impl Common {
    /// Seeds of the independent trials: `seed, seed + 1, ...`.
    pub fn seeds(&self) -> Vec<u64> {
        (0..self.trials as u64).map(|i| self.seed.wrapping_add(i)).collect()
    }
}

#[derive(Debug, Clone)]
pub struct Loaded<T> {
    pub common: Common,
    pub body: T,
    /// Fully resolved configuration (overrides applied, shared keys included).
    pub resolved: serde_json::Value,
    pub checksum: String,
}

#[derive(Debug, Clone, Default)]
pub struct Overrides {
    pub set: Vec<String>,
    pub seed: Option<u64>,
    pub out: Option<PathBuf>,
}

/// Parses `value` as a TOML value, falling back to a bare string.
fn parse_value(raw: &str) -> toml::Value {
    let doc = format!("v = {raw}");
    match doc.parse::<toml::Table>() {
        Ok(mut t) => t.remove("v").expect("key v"),
        Err(_) => toml::Value::String(raw.to_string()),
    }
}

pub fn apply_set(table: &mut toml::Table, assignment: &str) -> LabResult<()> {
    let (key, raw) = assignment
        .split_once('=')
        .ok_or_else(|| LabError::config(format!("--set `{assignment}`: expected key=value")))?;
    let path: Vec<&str> = key.trim().split('.').collect();
    if path.iter().any(|p| p.is_empty()) {
        return Err(LabError::config(format!("--set `{assignment}`: empty key segment")));
    }
    let mut cur = table;
    for part in &path[..path.len() - 1] {
        let entry = cur
            .entry(part.to_string())
            .or_insert_with(|| toml::Value::Table(toml::Table::new()));
        cur = entry
            .as_table_mut()
            .ok_or_else(|| LabError::config(format!("--set `{key}`: `{part}` is not a table")))?;
    }
    cur.insert(path[path.len() - 1].to_string(), parse_value(raw.trim()));
    Ok(())
}

fn take<T: DeserializeOwned>(table: &mut toml::Table, key: &str, default: T) -> LabResult<T> {
    match table.remove(key) {
        None => Ok(default),
        Some(v) => T::deserialize(v).map_err(|e| LabError::config(format!("{key}: {e}"))),
    }
}

/// Reads `path`, applies overrides and parses into `T`.
pub fn load<T: DeserializeOwned + Serialize>(path: &Path, ov: &Overrides) -> LabResult<Loaded<T>> {
    let text = std::fs::read_to_string(path).map_err(|e| {
        LabError::config(format!("cannot read config `{}`: {e}", path.display()))
    })?;
    parse(&text, ov)
}

pub fn parse<T: DeserializeOwned + Serialize>(text: &str, ov: &Overrides) -> LabResult<Loaded<T>> {
    let mut table: toml::Table = text
        .parse()
        .map_err(|e: toml::de::Error| LabError::config(format!("TOML: {e}")))?;
    for s in &ov.set {
        apply_set(&mut table, s)?;
    }
    let mut common = Common {
        seed: take(&mut table, "seed", 0u64)?,
        trials: take(&mut table, "trials", 1usize)?,
        output_dir: take(&mut table, "output_dir", PathBuf::from("out"))?,
    };
    if let Some(s) = ov.seed {
        common.seed = s;
    }
    if let Some(o) = &ov.out {
        common.output_dir = o.clone();
    }
    if common.trials == 0 {
        return Err(LabError::config("trials: must be at least 1"));
    }
    let body: T = serde_path_to_error::deserialize(toml::Value::Table(table)).map_err(|e| {
        let path = e.path().to_string();
        LabError::config(format!("{path}: {}", e.into_inner()))
    })?;
    let mut resolved = serde_json::to_value(&body).map_err(|e| LabError::config(e.to_string()))?;
    if let serde_json::Value::Object(map) = &mut resolved {
        map.insert("seed".into(), common.seed.into());
        map.insert("trials".into(), common.trials.into());
        map.insert("output_dir".into(), common.output_dir.display().to_string().into());
    }
    let checksum = hex::encode(Sha256::digest(resolved.to_string().as_bytes()));
    Ok(Loaded { common, body, resolved, checksum })
}

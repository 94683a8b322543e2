//! CSV report rows and the JSON run manifest.

use std::fs::OpenOptions;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::LabResult;

/// Bumped whenever the report columns change.
pub const REPORT_SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportRow {
    pub schema_version: u32,
    pub experiment: String,
    pub method: String,
    pub setting: String,
    pub seed: u64,
    pub metric_name: String,
    pub metric_value: f64,
    pub wall_time_seconds: f64,
    pub config_checksum: String,
}

/// Builds rows that share an experiment name and config checksum.
#[derive(Debug, Clone)]
pub struct RowFactory {
    pub experiment: String,
    pub checksum: String,
}

impl RowFactory {
    pub fn row(&self, method: &str, setting: &str, seed: u64, metric: &str, value: f64, wall: f64) -> ReportRow {
        ReportRow {
            schema_version: REPORT_SCHEMA_VERSION,
            experiment: self.experiment.clone(),
            method: method.to_string(),
            setting: setting.to_string(),
            seed,
            metric_name: metric.to_string(),
            metric_value: value,
            wall_time_seconds: wall,
            config_checksum: self.checksum.clone(),
        }
    }
}

/// Appends rows to `path`, writing the header only for a new file.
pub fn append_rows(path: &Path, rows: &[ReportRow]) -> LabResult<()> {
    let fresh = !path.exists() || std::fs::metadata(path)?.len() == 0;
    let file = OpenOptions::new().create(true).append(true).open(path)?;
    let mut w = csv::WriterBuilder::new().has_headers(fresh).from_writer(file);
    for r in rows {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_rows(path: &Path) -> LabResult<Vec<ReportRow>> {
    let mut r = csv::Reader::from_path(path)?;
    Ok(r.deserialize().collect::<Result<Vec<ReportRow>, _>>()?)
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct OutputEntry {
    pub path: PathBuf,
    pub sha256: String,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Manifest {
    pub command: String,
    pub tool_version: String,
    pub report_schema_version: u32,
    pub config_checksum: String,
    pub config: serde_json::Value,
    pub inputs: Vec<PathBuf>,
    pub outputs: Vec<OutputEntry>,
    pub wall_time_seconds: f64,
}

impl Manifest {
    pub fn new(command: &str, config: serde_json::Value, checksum: &str) -> Self {
        Self {
            command: command.to_string(),
            tool_version: env!("CARGO_PKG_VERSION").to_string(),
            report_schema_version: REPORT_SCHEMA_VERSION,
            config_checksum: checksum.to_string(),
            config,
            inputs: Vec::new(),
            outputs: Vec::new(),
            wall_time_seconds: 0.0,
        }
    }

    pub fn add_output(&mut self, path: &Path) -> LabResult<()> {
        let bytes = std::fs::read(path)?;
        self.outputs.retain(|o| o.path != path);
        self.outputs.push(OutputEntry {
            path: path.to_path_buf(),
            sha256: hex::encode(Sha256::digest(&bytes)),
        });
        Ok(())
    }

    /// Writes `manifest-<command>.json` into `dir` and returns its path.
    pub fn write(&self, dir: &Path) -> LabResult<PathBuf> {
        let path = dir.join(format!("manifest-{}.json", self.command));
        let text = serde_json::to_string_pretty(self).expect("manifest serializes");
        std::fs::write(&path, text)?;
        Ok(path)
    }
}

//! One function per CLI subcommand. Each loads its config, runs, writes its
//! artifacts and report rows into the output directory, and records them in
//! a manifest.

mod artifacts;
mod continual;
mod estimate;
mod sparsity;
mod suite;

use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::de::DeserializeOwned;
use serde::Serialize;

use crate::config::{self, Common, Overrides};
use crate::error::{LabError, LabResult};
use crate::report::{append_rows, Manifest, ReportRow, RowFactory};

pub use artifacts::{TrainCommand, DataConfig, IdxConfig};
pub use continual::{AblateCommand, EwcCommand};
pub use estimate::{Estimator, FisherCommand};
pub use sparsity::{MaskCommand, PruneCommand};
pub use suite::{EmbedCommand, MergeCommand};

pub const REPORT_FILE: &str = "report.csv";

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Command {
    Train,
    Fisher,
    Merge,
    Prune,
    Mask,
    Embed,
    Ewc,
    Ablate,
}

impl Command {
    pub fn name(self) -> &'static str {
        match self {
            Command::Train => "train",
            Command::Fisher => "fisher",
            Command::Merge => "merge",
            Command::Prune => "prune",
            Command::Mask => "mask",
            Command::Embed => "embed",
            Command::Ewc => "ewc",
            Command::Ablate => "ablate",
        }
    }
}

/// What a finished command produced.
#[derive(Debug, Clone)]
pub struct RunSummary {
    pub rows: Vec<ReportRow>,
    pub manifest: PathBuf,
    pub outputs: Vec<PathBuf>,
}

/// Shared state of one command invocation.
pub struct Context {
    pub common: Common,
    pub rows: RowFactory,
    manifest: Manifest,
    started: Instant,
}

impl Context {
    pub fn out_dir(&self) -> &Path {
        &self.common.output_dir
    }

    pub fn output_path(&self, name: &str) -> PathBuf {
        self.common.output_dir.join(name)
    }

    /// Registers a file written by the command.
    pub fn record(&mut self, path: &Path) -> LabResult<()> {
        self.manifest.add_output(path)
    }

    pub fn input(&mut self, path: &Path) {
        if !self.manifest.inputs.iter().any(|p| p == path) {
            self.manifest.inputs.push(path.to_path_buf());
        }
    }

    pub fn write_text(&mut self, name: &str, text: &str) -> LabResult<PathBuf> {
        let path = self.output_path(name);
        std::fs::write(&path, text)?;
        self.record(&path)?;
        Ok(path)
    }

    fn finish(mut self, rows: Vec<ReportRow>) -> LabResult<RunSummary> {
        let report = self.output_path(REPORT_FILE);
        append_rows(&report, &rows)?;
        self.record(&report)?;
        self.manifest.wall_time_seconds = self.started.elapsed().as_secs_f64();
        let outputs = self.manifest.outputs.iter().map(|o| o.path.clone()).collect();
        let manifest = self.manifest.write(&self.common.output_dir)?;
        Ok(RunSummary { rows, manifest, outputs })
    }
}

/// Checks that an input artifact exists.
pub fn require(path: &Path, what: &str) -> LabResult<()> {
    if path.is_file() {
        Ok(())
    } else {
        Err(LabError::MissingArtifact { path: path.to_path_buf(), what: what.to_string() })
    }
}

fn prepare<T: DeserializeOwned + Serialize>(
    cmd: Command,
    text: &str,
    ov: &Overrides,
    validate: impl Fn(&T) -> Vec<String>,
) -> LabResult<(Context, T)> {
    let loaded = config::parse::<T>(text, ov)?;
    let problems = validate(&loaded.body);
    if !problems.is_empty() {
        return Err(LabError::Config(problems));
    }
    std::fs::create_dir_all(&loaded.common.output_dir)?;
    let ctx = Context {
        rows: RowFactory { experiment: cmd.name().to_string(), checksum: loaded.checksum.clone() },
        manifest: Manifest::new(cmd.name(), loaded.resolved.clone(), &loaded.checksum),
        common: loaded.common,
        started: Instant::now(),
    };
    Ok((ctx, loaded.body))
}

/// Runs `cmd` with the configuration file at `path`.
pub fn run(cmd: Command, path: &Path, ov: &Overrides) -> LabResult<RunSummary> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| LabError::config(format!("cannot read config `{}`: {e}", path.display())))?;
    run_text(cmd, &text, ov)
}

/// Runs `cmd` with configuration text.
pub fn run_text(cmd: Command, text: &str, ov: &Overrides) -> LabResult<RunSummary> {
    macro_rules! go {
        ($ty:ty, $f:path) => {{
            let (mut ctx, body) = prepare::<$ty>(cmd, text, ov, |b| b.validate())?;
            let rows = $f(&mut ctx, &body)?;
            ctx.finish(rows)
        }};
    }
    match cmd {
        Command::Train => go!(TrainCommand, artifacts::train),
        Command::Fisher => go!(FisherCommand, estimate::fisher),
        Command::Merge => go!(MergeCommand, suite::merge),
        Command::Prune => go!(PruneCommand, sparsity::prune),
        Command::Mask => go!(MaskCommand, sparsity::mask),
        Command::Embed => go!(EmbedCommand, suite::embed),
        Command::Ewc => go!(EwcCommand, continual::ewc),
        Command::Ablate => go!(AblateCommand, continual::ablate),
    }
}

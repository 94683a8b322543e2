use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::{Deserialize, Serialize};
use squisher_core::data::{generate, load_idx, Dataset, GeneratorSpec};
use squisher_core::fisher::FisherDiagonal;
use squisher_core::nn;
use squisher_core::optim::{load_checkpoint, save_checkpoint, Checkpoint};
use squisher_core::train::{train_checkpoint, TrainConfig};

use super::{require, Context};
use crate::error::{LabError, LabResult};
use crate::experiments::ModelConfig;
use crate::pool::fan_out;
use crate::report::ReportRow;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct IdxConfig {
    pub train_images: PathBuf,
    pub train_labels: PathBuf,
    #[serde(default)]
    pub test_images: Option<PathBuf>,
    #[serde(default)]
    pub test_labels: Option<PathBuf>,
}

/// Exactly one of a synthetic generator or IDX files.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataConfig {
    #[serde(default)]
    pub generator: Option<GeneratorSpec>,
    #[serde(default)]
    pub idx: Option<IdxConfig>,
}

impl DataConfig {
    pub fn validate(&self) -> Vec<String> {
        match (&self.generator, &self.idx) {
            (Some(g), None) => g.validate().err().map(|e| vec![format!("data.generator: {e}")]).unwrap_or_default(),
            (None, Some(i)) if i.test_images.is_some() != i.test_labels.is_some() => {
                vec!["data.idx: give both test_images and test_labels or neither".into()]
            }
            (None, Some(_)) => Vec::new(),
            _ => vec!["data: set exactly one of `generator` or `idx`".into()],
        }
    }

    /// Train and test splits; the IDX test split defaults to the training data.
    pub fn load(&self, ctx: &mut Context) -> LabResult<(Dataset, Dataset)> {
        if let Some(g) = &self.generator {
            let stream = generate(g)?;
            let train = Dataset::concat(&stream.tasks.iter().map(|t| t.train.clone()).collect::<Vec<_>>())?;
            let test = Dataset::concat(&stream.tasks.iter().map(|t| t.test.clone()).collect::<Vec<_>>())?;
            return Ok((train, test));
        }
        let idx = self.idx.as_ref().expect("validated");
        let read = |ctx: &mut Context, images: &Path, labels: &Path| -> LabResult<Dataset> {
            require(images, "IDX images")?;
            require(labels, "IDX labels")?;
            ctx.input(images);
            ctx.input(labels);
            let (x, y) = load_idx(images, labels)?;
            Ok(Dataset::new(x, y, None)?)
        };
        let train = read(ctx, &idx.train_images, &idx.train_labels)?;
        let test = match (&idx.test_images, &idx.test_labels) {
            (Some(i), Some(l)) => read(ctx, i, l)?,
            _ => train.clone(),
        };
        Ok((train, test))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainCommand {
    pub data: DataConfig,
    pub model: ModelConfig,
    pub train: TrainConfig,
}

impl TrainCommand {
    pub fn validate(&self) -> Vec<String> {
        let mut p = self.data.validate();
        if let Err(e) = self.train.validate() {
            p.push(format!("train: {e}"));
        }
        if self.model.hidden.contains(&0) {
            p.push("model.hidden: widths must be positive".into());
        }
        p
    }
}

pub fn checkpoint_name(seed: u64) -> String {
    format!("checkpoint-seed{seed}.ckpt")
}

pub(super) fn train(ctx: &mut Context, cmd: &TrainCommand) -> LabResult<Vec<ReportRow>> {
    let (train, test) = cmd.data.load(ctx)?;
    let classes = train
        .labels()
        .iter()
        .chain(test.labels())
        .filter_map(|y| y.class())
        .max()
        .map(|c| c + 1)
        .ok_or_else(|| LabError::config("data: training needs class labels"))?;
    let spec = cmd.model.spec(train.dims(), classes)?;
    for (name, d) in [("train.data", &train), ("test.data", &test)] {
        let path = ctx.output_path(name);
        d.save(&path)?;
        ctx.record(&path)?;
    }
    let runs = fan_out(&ctx.common.seeds(), |seed| {
        let t = Instant::now();
        let ckpt = train_checkpoint(&spec, &train, &cmd.train, seed, "train.data")?;
        Ok((seed, ckpt, t.elapsed().as_secs_f64()))
    })?;
    let mut rows = Vec::new();
    for (seed, ckpt, wall) in runs {
        let path = ctx.output_path(&checkpoint_name(seed));
        save_checkpoint(&ckpt, &path)?;
        ctx.record(&path)?;
        let f = &ctx.rows;
        rows.push(f.row("train", "train", seed, "train_accuracy", nn::accuracy(&spec, &ckpt.params, &train)?, wall));
        rows.push(f.row("train", "test", seed, "test_accuracy", nn::accuracy(&spec, &ckpt.params, &test)?, wall));
        rows.push(f.row("train", "train", seed, "train_loss", nn::mean_loss(&spec, &ckpt.params, &train)?, wall));
    }
    Ok(rows)
}

pub(super) fn load_ckpt(ctx: &mut Context, path: &Path) -> LabResult<Checkpoint> {
    require(path, "checkpoint")?;
    ctx.input(path);
    Ok(load_checkpoint(path)?)
}

pub(super) fn load_dataset(ctx: &mut Context, path: &Path) -> LabResult<Dataset> {
    require(path, "dataset")?;
    ctx.input(path);
    Ok(Dataset::load(path)?)
}

pub(super) fn load_fisher(ctx: &mut Context, path: &Path) -> LabResult<FisherDiagonal> {
    require(path, "Fisher diagonal")?;
    ctx.input(path);
    Ok(FisherDiagonal::load(path)?)
}

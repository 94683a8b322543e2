use std::path::PathBuf;
use std::time::Instant;

use serde::{Deserialize, Serialize};
use squisher_core::fisher::{self, rescale, FisherDiagonal, OracleMode, Scaling};
use squisher_core::optim::load_checkpoint;
use squisher_core::rng::{self, purpose};

use super::artifacts::{load_ckpt, load_dataset};
use super::{require, Context};
use crate::error::{LabError, LabResult};
use crate::pool::fan_out;
use crate::report::ReportRow;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Estimator {
    Empirical,
    StandardMc,
    /// Square of the summed per-example gradients.
    Joint,
    Squisher,
    /// Squared mini-batch gradients over one pass, no moving average.
    JointBatched,
    OracleStandard,
    OracleJoint,
}

impl Estimator {
    pub fn name(self) -> &'static str {
        match self {
            Estimator::Empirical => "empirical",
            Estimator::StandardMc => "standard_mc",
            Estimator::Joint => "joint",
            Estimator::Squisher => "squisher",
            Estimator::JointBatched => "joint_batched",
            Estimator::OracleStandard => "oracle_standard",
            Estimator::OracleJoint => "oracle_joint",
        }
    }

    fn stochastic(self) -> bool {
        self == Estimator::StandardMc
    }
}

fn default_scaling() -> Scaling {
    Scaling::SumOverN
}
fn one() -> usize {
    1
}
fn yes() -> bool {
    true
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FisherCommand {
    pub checkpoint: PathBuf,
    /// Training data; unused by the squisher estimator.
    #[serde(default)]
    pub dataset: Option<PathBuf>,
    pub estimator: Estimator,
    #[serde(default = "default_scaling")]
    pub scaling: Scaling,
    #[serde(default = "one")]
    pub mc_samples: usize,
    #[serde(default = "yes")]
    pub bias_corrected: bool,
    /// Batch size for `joint_batched`; defaults to the checkpoint's.
    #[serde(default)]
    pub batch_size: Option<usize>,
}

impl FisherCommand {
    pub fn validate(&self) -> Vec<String> {
        let mut p = Vec::new();
        if self.estimator != Estimator::Squisher && self.dataset.is_none() {
            p.push(format!("dataset: required by the {} estimator", self.estimator.name()));
        }
        if self.mc_samples == 0 {
            p.push("mc_samples: must be at least 1".into());
        }
        if self.batch_size == Some(0) {
            p.push("batch_size: must be positive".into());
        }
        p
    }
}

pub fn fisher_file_name(estimator: Estimator, seed: Option<u64>) -> String {
    match seed {
        Some(s) => format!("fisher-{}-seed{s}.fish", estimator.name()),
        None => format!("fisher-{}.fish", estimator.name()),
    }
}

pub(super) fn fisher(ctx: &mut Context, cmd: &FisherCommand) -> LabResult<Vec<ReportRow>> {
    let est = cmd.estimator;
    if est == Estimator::Squisher {
        require(&cmd.checkpoint, "checkpoint")?;
        ctx.input(&cmd.checkpoint);
        let runs = fan_out(&ctx.common.seeds(), |seed| {
            // Timed from the file on disk: load plus rescale.
            let t = Instant::now();
            let ckpt = load_checkpoint(&cmd.checkpoint)?;
            let f = rescale(&fisher::squisher(&ckpt, cmd.bias_corrected)?, cmd.scaling);
            Ok((seed, f, t.elapsed().as_secs_f64()))
        })?;
        return finish(ctx, est, runs);
    }
    let ckpt = load_ckpt(ctx, &cmd.checkpoint)?;
    let data = load_dataset(ctx, cmd.dataset.as_ref().expect("validated"))?;
    let (spec, params) = (&ckpt.mlp_spec, &ckpt.params);
    let runs = fan_out(&ctx.common.seeds(), |seed| {
        let t = Instant::now();
        let f = match est {
            Estimator::Empirical => fisher::empirical_fisher(spec, params, &data, cmd.scaling)?,
            Estimator::Joint => fisher::joint_empirical_fisher(spec, params, &data, cmd.scaling)?,
            Estimator::StandardMc => {
                let mut r = rng::stream(seed, &[purpose::LABELS]);
                fisher::standard_fisher_mc(spec, params, &data, cmd.mc_samples, &mut r, cmd.scaling)?
            }
            Estimator::JointBatched => {
                let b = cmd.batch_size.unwrap_or(ckpt.provenance.batch_size);
                rescale(&fisher::joint_batched_fisher(spec, params, &data, b)?, cmd.scaling)
            }
            Estimator::OracleStandard => {
                rescale(&fisher::oracle_fisher(spec, params, &data, OracleMode::Standard)?, cmd.scaling)
            }
            Estimator::OracleJoint => {
                rescale(&fisher::oracle_fisher(spec, params, &data, OracleMode::Joint)?, cmd.scaling)
            }
            Estimator::Squisher => unreachable!("handled above"),
        };
        Ok((seed, f, t.elapsed().as_secs_f64()))
    })?;
    finish(ctx, est, runs)
}

fn finish(ctx: &mut Context, est: Estimator, runs: Vec<(u64, FisherDiagonal, f64)>) -> LabResult<Vec<ReportRow>> {
    let mut rows = Vec::new();
    for (i, (seed, f, wall)) in runs.iter().enumerate() {
        if i == 0 || est.stochastic() {
            let name = fisher_file_name(est, est.stochastic().then_some(*seed));
            let path = ctx.output_path(&name);
            f.save(&path)?;
            ctx.record(&path)?;
        }
        let mean = f.values().iter().sum::<f64>() / f.values().len().max(1) as f64;
        let setting = f.scaling.name();
        rows.push(ctx.rows.row(est.name(), setting, *seed, "extraction_seconds", *wall, *wall));
        rows.push(ctx.rows.row(est.name(), setting, *seed, "mean_value", mean, *wall));
    }
    if runs.is_empty() {
        return Err(LabError::config("trials: nothing to run"));
    }
    Ok(rows)
}

use std::path::PathBuf;
use std::time::Instant;

use serde::{Deserialize, Serialize};
use squisher_core::fisher::{self, FisherDiagonal, Scaling};
use squisher_core::merge::{fisher_merge, linear_merge, ubgm_merge, MergeInput, DEFAULT_EPSILON};
use squisher_core::optim::{save_checkpoint, Checkpoint, OptimizerState, Provenance};
use squisher_core::nn;

use super::artifacts::{load_ckpt, load_dataset, load_fisher};
use super::Context;
use crate::error::{LabError, LabResult};
use crate::experiments::embedding::EmbeddingExperiment;
use crate::experiments::merging::{MergeRule, MergingExperiment};
use crate::experiments::Importance;
use crate::pool::fan_out;
use crate::report::ReportRow;

fn all_methods() -> Vec<Importance> {
    Importance::ALL.to_vec()
}
fn default_rule() -> MergeRule {
    MergeRule::Weighted
}
fn default_epsilon() -> f64 {
    DEFAULT_EPSILON
}
fn yes() -> bool {
    true
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MergeCommand {
    /// Self-contained synthetic experiment; excludes the artifact fields.
    #[serde(default)]
    pub experiment: Option<MergingExperiment>,
    #[serde(default)]
    pub checkpoints: Vec<PathBuf>,
    /// Precomputed Fishers, one per checkpoint, for the `fisher` method.
    #[serde(default)]
    pub fishers: Vec<PathBuf>,
    /// Training sets, one per checkpoint, when `fishers` is not given.
    #[serde(default)]
    pub datasets: Vec<PathBuf>,
    #[serde(default = "all_methods")]
    pub methods: Vec<Importance>,
    #[serde(default = "default_rule")]
    pub rule: MergeRule,
    #[serde(default)]
    pub base: Option<PathBuf>,
    #[serde(default)]
    pub base_fisher: Option<PathBuf>,
    #[serde(default)]
    pub base_dataset: Option<PathBuf>,
    #[serde(default)]
    pub eval_dataset: Option<PathBuf>,
    #[serde(default = "default_epsilon")]
    pub epsilon: f64,
    #[serde(default = "yes")]
    pub bias_corrected: bool,
}

impl MergeCommand {
    pub fn validate(&self) -> Vec<String> {
        let mut p = Vec::new();
        match (&self.experiment, self.checkpoints.is_empty()) {
            (Some(e), true) => p.extend(e.validate().into_iter().map(|s| format!("experiment.{s}"))),
            (None, false) => {
                let m = self.checkpoints.len();
                let min = if self.rule == MergeRule::Ubgm { 1 } else { 2 };
                if m < min {
                    p.push(format!("checkpoints: need at least {min}, got {m}"));
                }
                let wants_fisher = self.methods.contains(&Importance::Fisher);
                if wants_fisher && self.fishers.len() != m && self.datasets.len() != m {
                    p.push("fishers/datasets: the fisher method needs one Fisher or dataset per checkpoint".into());
                }
                if self.rule == MergeRule::Ubgm {
                    if self.base.is_none() {
                        p.push("base: required by the ubgm rule".into());
                    }
                    if wants_fisher && self.base_fisher.is_none() && self.base_dataset.is_none() {
                        p.push("base_fisher/base_dataset: required by ubgm with the fisher method".into());
                    }
                }
            }
            _ => p.push("set exactly one of `experiment` or `checkpoints`".into()),
        }
        if !(self.epsilon >= 0.0 && self.epsilon.is_finite()) {
            p.push(format!("epsilon: must be >= 0, got {}", self.epsilon));
        }
        if self.methods.is_empty() {
            p.push("methods: at least one method is required".into());
        }
        p
    }
}

pub(super) fn merge(ctx: &mut Context, cmd: &MergeCommand) -> LabResult<Vec<ReportRow>> {
    if let Some(exp) = &cmd.experiment {
        let runs = fan_out(&ctx.common.seeds(), |seed| {
            let t = Instant::now();
            let r = exp.run(seed)?;
            Ok((r, t.elapsed().as_secs_f64()))
        })?;
        let mut rows = Vec::new();
        for (r, wall) in runs {
            for (i, a) in r.individual.iter().enumerate() {
                rows.push(ctx.rows.row(&format!("individual{i}"), "union_test", r.seed, "accuracy", *a, wall));
            }
            for (m, rule, a) in r.merged.iter().filter(|(m, _, _)| cmd.methods.contains(m)) {
                let setting = format!("{rule:?}").to_lowercase();
                rows.push(ctx.rows.row(m.name(), &setting, r.seed, "accuracy", *a, wall));
            }
        }
        return Ok(rows);
    }

    let models = cmd
        .checkpoints
        .iter()
        .map(|p| load_ckpt(ctx, p))
        .collect::<LabResult<Vec<_>>>()?;
    let base = cmd.base.as_ref().map(|p| load_ckpt(ctx, p)).transpose()?;
    let eval = cmd.eval_dataset.as_ref().map(|p| load_dataset(ctx, p)).transpose()?;
    let first = &models[0];
    for (i, m) in models.iter().enumerate().skip(1) {
        if m.mlp_spec != first.mlp_spec {
            return Err(LabError::config(format!("checkpoints[{i}]: architecture differs from checkpoints[0]")));
        }
    }
    let mut parents = models.iter().map(|m| m.checksum()).collect::<squisher_core::Result<Vec<_>>>()?;
    if let Some(b) = &base {
        parents.push(b.checksum()?);
    }

    let setting = format!("{:?}", cmd.rule).to_lowercase();
    let mut rows = Vec::new();
    for &method in &cmd.methods {
        let t = Instant::now();
        let merged = if method == Importance::Baseline {
            linear_merge(&models.iter().map(|m| m.params.clone()).collect::<Vec<_>>())?
        } else {
            let mut pairs = Vec::new();
            for (i, m) in models.iter().enumerate() {
                let f = importance(ctx, cmd, method, m, cmd.fishers.get(i), cmd.datasets.get(i))?;
                pairs.push((m.params.clone(), f));
            }
            let input = MergeInput::new(pairs).with_epsilon(cmd.epsilon);
            match (cmd.rule, &base) {
                (MergeRule::Weighted, _) => fisher_merge(&input)?,
                (MergeRule::Ubgm, Some(b)) => {
                    let bf = importance(ctx, cmd, method, b, cmd.base_fisher.as_ref(), cmd.base_dataset.as_ref())?;
                    ubgm_merge(&input.with_base(b.params.clone(), bf))?
                }
                (MergeRule::Ubgm, None) => unreachable!("validated"),
            }
        };
        let wall = t.elapsed().as_secs_f64();
        let state = &first.optimizer_state;
        let ckpt = Checkpoint::new(
            first.mlp_spec.clone(),
            merged.clone(),
            OptimizerState::new(state.kind, &merged, state.hyper)?,
            Provenance {
                dataset_id: "merged".into(),
                dataset_size: models.iter().map(|m| m.provenance.dataset_size).sum(),
                batch_size: first.provenance.batch_size,
                steps: 0,
                seed: ctx.common.seed,
                parents: parents.clone(),
            },
        )?;
        let path = ctx.output_path(&format!("merged-{}-{setting}.ckpt", method.name()));
        save_checkpoint(&ckpt, &path)?;
        ctx.record(&path)?;
        let seed = ctx.common.seed;
        let drift = merged
            .values()
            .iter()
            .zip(first.params.values())
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max);
        rows.push(ctx.rows.row(method.name(), &setting, seed, "max_abs_change_vs_first", drift, wall));
        if let Some(d) = &eval {
            rows.push(ctx.rows.row(method.name(), &setting, seed, "accuracy", nn::accuracy(&first.mlp_spec, &merged, d)?, wall));
        }
    }
    Ok(rows)
}

fn importance(
    ctx: &mut Context,
    cmd: &MergeCommand,
    method: Importance,
    ckpt: &Checkpoint,
    fisher_file: Option<&PathBuf>,
    dataset: Option<&PathBuf>,
) -> LabResult<FisherDiagonal> {
    match method {
        Importance::Squisher => Ok(fisher::squisher(ckpt, cmd.bias_corrected)?),
        _ => match (fisher_file, dataset) {
            (Some(f), _) => load_fisher(ctx, f),
            (None, Some(d)) => {
                let data = load_dataset(ctx, d)?;
                Ok(fisher::empirical_fisher(&ckpt.mlp_spec, &ckpt.params, &data, Scaling::SumOverN)?)
            }
            (None, None) => Err(LabError::config("merge: no Fisher file or dataset for a model")),
        },
    }
}

pub type EmbedCommand = EmbeddingExperiment;

pub(super) fn embed(ctx: &mut Context, cmd: &EmbedCommand) -> LabResult<Vec<ReportRow>> {
    let runs = fan_out(&ctx.common.seeds(), |seed| {
        let t = Instant::now();
        let r = cmd.run(seed)?;
        Ok((r, t.elapsed().as_secs_f64()))
    })?;
    let mut rows = Vec::new();
    let mut csv = String::from("method,seed,target,source,distance,rank\n");
    for (r, wall) in &runs {
        for (m, rankings) in &r.rankings {
            for q in rankings {
                for line in q.csv_rows() {
                    csv.push_str(&format!("{},{},{line}\n", m.name(), r.seed));
                }
            }
            rows.push(ctx.rows.row(m.name(), "planted_suite", r.seed, "mrr", r.mrr(*m)?, *wall));
        }
        let json: serde_json::Map<String, serde_json::Value> = r
            .embeddings
            .iter()
            .map(|(m, table)| (m.name().to_string(), serde_json::to_value(table).expect("embeddings serialize")))
            .collect();
        let text = serde_json::to_string_pretty(&json).expect("json");
        ctx.write_text(&format!("embeddings-seed{}.json", r.seed), &text)?;
    }
    ctx.write_text("rankings.csv", &csv)?;
    Ok(rows)
}

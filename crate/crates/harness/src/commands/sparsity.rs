use std::path::PathBuf;
use std::time::Instant;

use serde::{Deserialize, Serialize};
use squisher_core::fisher::{self, FisherDiagonal, Scaling};
use squisher_core::nn;
use squisher_core::optim::{save_checkpoint, Checkpoint, OptimizerState};
use squisher_core::rng::{self, purpose};
use squisher_core::sparsify::{
    apply_fish_reset, apply_prune, kept_count, pruning_stats, random_mask, top_k_mask, Mask,
};

use super::artifacts::{load_ckpt, load_dataset, load_fisher};
use super::Context;
use crate::error::{LabError, LabResult};
use crate::experiments::pruning::PruningExperiment;
use crate::experiments::reset::ResetExperiment;
use crate::experiments::Importance;
use crate::pool::fan_out;
use crate::report::ReportRow;

fn all_methods() -> Vec<Importance> {
    Importance::ALL.to_vec()
}

fn yes() -> bool {
    true
}

/// Where the importance of an artifact comes from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ImportanceInputs {
    /// Precomputed Fisher for the `fisher` method.
    #[serde(default)]
    pub fisher: Option<PathBuf>,
    /// Training data for computing the empirical Fisher when no file is given.
    #[serde(default)]
    pub dataset: Option<PathBuf>,
    #[serde(default = "yes")]
    pub bias_corrected: bool,
}

impl ImportanceInputs {
    fn check(&self, methods: &[Importance], p: &mut Vec<String>) {
        if methods.contains(&Importance::Fisher) && self.fisher.is_none() && self.dataset.is_none() {
            p.push("importance: the fisher method needs `fisher` or `dataset`".into());
        }
    }

    fn resolve(&self, ctx: &mut Context, method: Importance, ckpt: &Checkpoint) -> LabResult<Option<FisherDiagonal>> {
        Ok(match method {
            Importance::Fisher => Some(match (&self.fisher, &self.dataset) {
                (Some(path), _) => load_fisher(ctx, path)?,
                (None, Some(d)) => {
                    let data = load_dataset(ctx, d)?;
                    fisher::empirical_fisher(&ckpt.mlp_spec, &ckpt.params, &data, Scaling::SumOverN)?
                }
                (None, None) => return Err(LabError::config("importance: fisher needs `fisher` or `dataset`")),
            }),
            Importance::Squisher => Some(fisher::squisher(ckpt, self.bias_corrected)?),
            Importance::Baseline => None,
        })
    }
}

fn choose_mask(
    f: Option<FisherDiagonal>,
    scores: impl Fn(&FisherDiagonal) -> LabResult<Vec<f64>>,
    len: usize,
    k: usize,
    seed: u64,
) -> LabResult<Mask> {
    Ok(match f {
        Some(f) => top_k_mask(&scores(&f)?, k)?,
        None => random_mask(len, k, &mut rng::stream(seed, &[purpose::MASK]))?,
    })
}

fn zeroed_state(ckpt: &Checkpoint) -> LabResult<OptimizerState> {
    let s = &ckpt.optimizer_state;
    Ok(OptimizerState::new(s.kind, &ckpt.params, s.hyper)?)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PruneCommand {
    /// Self-contained synthetic experiment; excludes the artifact fields.
    #[serde(default)]
    pub experiment: Option<PruningExperiment>,
    #[serde(default)]
    pub checkpoint: Option<PathBuf>,
    #[serde(default)]
    pub importance: Option<ImportanceInputs>,
    #[serde(default)]
    pub eval_dataset: Option<PathBuf>,
    #[serde(default)]
    pub prune_fraction: Option<f64>,
    #[serde(default = "all_methods")]
    pub methods: Vec<Importance>,
}

impl PruneCommand {
    pub fn validate(&self) -> Vec<String> {
        let mut p = Vec::new();
        match (&self.experiment, &self.checkpoint) {
            (Some(e), None) => p.extend(e.validate().into_iter().map(|s| format!("experiment.{s}"))),
            (None, Some(_)) => {
                match self.prune_fraction {
                    Some(f) if (0.0..=1.0).contains(&f) => {}
                    Some(f) => p.push(format!("prune_fraction: must lie in [0, 1], got {f}")),
                    None => p.push("prune_fraction: required with `checkpoint`".into()),
                }
                if self.eval_dataset.is_none() {
                    p.push("eval_dataset: required with `checkpoint`".into());
                }
                match &self.importance {
                    Some(i) => i.check(&self.methods, &mut p),
                    None => p.push("importance: required with `checkpoint`".into()),
                }
            }
            _ => p.push("set exactly one of `experiment` or `checkpoint`".into()),
        }
        if self.methods.is_empty() {
            p.push("methods: at least one method is required".into());
        }
        p
    }
}

pub(super) fn prune(ctx: &mut Context, cmd: &PruneCommand) -> LabResult<Vec<ReportRow>> {
    if let Some(exp) = &cmd.experiment {
        let runs = fan_out(&ctx.common.seeds(), |seed| {
            let t = Instant::now();
            let r = exp.run(seed)?;
            Ok((r, t.elapsed().as_secs_f64()))
        })?;
        let setting = format!("prune_fraction={}", exp.prune_fraction);
        let mut rows = Vec::new();
        for (r, wall) in runs {
            rows.push(ctx.rows.row("dense", &setting, r.seed, "accuracy", r.dense_accuracy, wall));
            for (m, acc) in r.pruned.iter().filter(|(m, _)| cmd.methods.contains(m)) {
                rows.push(ctx.rows.row(m.name(), &setting, r.seed, "accuracy", *acc, wall));
            }
        }
        return Ok(rows);
    }
    let ckpt = load_ckpt(ctx, cmd.checkpoint.as_ref().expect("validated"))?;
    let eval = load_dataset(ctx, cmd.eval_dataset.as_ref().expect("validated"))?;
    let inputs = cmd.importance.clone().expect("validated");
    let fraction = cmd.prune_fraction.expect("validated");
    let k = kept_count(ckpt.params.len(), 1.0 - fraction)?;
    let setting = format!("prune_fraction={fraction}");
    let mut rows = Vec::new();
    let dense = nn::accuracy(&ckpt.mlp_spec, &ckpt.params, &eval)?;
    for seed in ctx.common.seeds() {
        rows.push(ctx.rows.row("dense", &setting, seed, "accuracy", dense, 0.0));
        for &m in &cmd.methods {
            let t = Instant::now();
            let f = inputs.resolve(ctx, m, &ckpt)?;
            let mask = choose_mask(
                f,
                |f| Ok(pruning_stats(&ckpt.params, f)?.rho.into_values()),
                ckpt.params.len(),
                k,
                seed,
            )?;
            let params = apply_prune(&ckpt.params, &mask)?;
            let wall = t.elapsed().as_secs_f64();
            let mut out = Checkpoint { params, optimizer_state: zeroed_state(&ckpt)?, ..ckpt.clone() };
            out.provenance.steps = 0;
            out.provenance.parents = vec![ckpt.checksum()?];
            let path = ctx.output_path(&format!("pruned-{}-seed{seed}.ckpt", m.name()));
            save_checkpoint(&out, &path)?;
            ctx.record(&path)?;
            let acc = nn::accuracy(&ckpt.mlp_spec, &out.params, &eval)?;
            rows.push(ctx.rows.row(m.name(), &setting, seed, "accuracy", acc, wall));
        }
    }
    Ok(rows)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MaskCommand {
    #[serde(default)]
    pub experiment: Option<ResetExperiment>,
    #[serde(default)]
    pub pretrained: Option<PathBuf>,
    #[serde(default)]
    pub finetuned: Option<PathBuf>,
    #[serde(default)]
    pub importance: Option<ImportanceInputs>,
    #[serde(default)]
    pub eval_dataset: Option<PathBuf>,
    #[serde(default)]
    pub keep_fraction: Option<f64>,
    #[serde(default = "all_methods")]
    pub methods: Vec<Importance>,
}

impl MaskCommand {
    pub fn validate(&self) -> Vec<String> {
        let mut p = Vec::new();
        match (&self.experiment, &self.finetuned) {
            (Some(e), None) => p.extend(e.validate().into_iter().map(|s| format!("experiment.{s}"))),
            (None, Some(_)) => {
                if self.pretrained.is_none() {
                    p.push("pretrained: required with `finetuned`".into());
                }
                match self.keep_fraction {
                    Some(f) if (0.0..=1.0).contains(&f) => {}
                    Some(f) => p.push(format!("keep_fraction: must lie in [0, 1], got {f}")),
                    None => p.push("keep_fraction: required with `finetuned`".into()),
                }
                if self.eval_dataset.is_none() {
                    p.push("eval_dataset: required with `finetuned`".into());
                }
                match &self.importance {
                    Some(i) => i.check(&self.methods, &mut p),
                    None => p.push("importance: required with `finetuned`".into()),
                }
            }
            _ => p.push("set exactly one of `experiment` or `finetuned`".into()),
        }
        if self.methods.is_empty() {
            p.push("methods: at least one method is required".into());
        }
        p
    }
}

pub(super) fn mask(ctx: &mut Context, cmd: &MaskCommand) -> LabResult<Vec<ReportRow>> {
    if let Some(exp) = &cmd.experiment {
        let runs = fan_out(&ctx.common.seeds(), |seed| {
            let t = Instant::now();
            let r = exp.run(seed)?;
            Ok((r, t.elapsed().as_secs_f64()))
        })?;
        let setting = format!("keep_fraction={}", exp.keep_fraction);
        let mut rows = Vec::new();
        for (r, wall) in runs {
            rows.push(ctx.rows.row("pretrained", &setting, r.seed, "accuracy", r.pretrained_accuracy, wall));
            rows.push(ctx.rows.row("finetuned", &setting, r.seed, "accuracy", r.finetuned_accuracy, wall));
            let retained = r.retained();
            for (i, (m, acc)) in r.reset.iter().enumerate() {
                if cmd.methods.contains(m) {
                    rows.push(ctx.rows.row(m.name(), &setting, r.seed, "accuracy", *acc, wall));
                    rows.push(ctx.rows.row(m.name(), &setting, r.seed, "gap_retained", retained[i].1, wall));
                }
            }
        }
        return Ok(rows);
    }
    let pre = load_ckpt(ctx, cmd.pretrained.as_ref().expect("validated"))?;
    let ft = load_ckpt(ctx, cmd.finetuned.as_ref().expect("validated"))?;
    pre.params
        .ensure_compatible(&ft.params, "pretrained vs fine-tuned")
        .map_err(|e| LabError::config(e.to_string()))?;
    let eval = load_dataset(ctx, cmd.eval_dataset.as_ref().expect("validated"))?;
    let inputs = cmd.importance.clone().expect("validated");
    let fraction = cmd.keep_fraction.expect("validated");
    let k = kept_count(ft.params.len(), fraction)?;
    let setting = format!("keep_fraction={fraction}");
    let spec = &ft.mlp_spec;
    let acc_pre = nn::accuracy(spec, &pre.params, &eval)?;
    let acc_ft = nn::accuracy(spec, &ft.params, &eval)?;
    let mut rows = Vec::new();
    for seed in ctx.common.seeds() {
        rows.push(ctx.rows.row("pretrained", &setting, seed, "accuracy", acc_pre, 0.0));
        rows.push(ctx.rows.row("finetuned", &setting, seed, "accuracy", acc_ft, 0.0));
        for &m in &cmd.methods {
            let t = Instant::now();
            let f = inputs.resolve(ctx, m, &ft)?;
            let mask = choose_mask(f, |f| Ok(f.values().to_vec()), ft.params.len(), k, seed)?;
            let params = apply_fish_reset(&ft.params, &pre.params, &mask)?;
            let wall = t.elapsed().as_secs_f64();
            let json = mask.to_json(&ft.params)?;
            ctx.write_text(&format!("mask-{}-seed{seed}.json", m.name()), &json)?;
            let mut out = Checkpoint { params, optimizer_state: zeroed_state(&ft)?, ..ft.clone() };
            out.provenance.steps = 0;
            out.provenance.parents = vec![pre.checksum()?, ft.checksum()?];
            let path = ctx.output_path(&format!("reset-{}-seed{seed}.ckpt", m.name()));
            save_checkpoint(&out, &path)?;
            ctx.record(&path)?;
            let acc = nn::accuracy(spec, &out.params, &eval)?;
            rows.push(ctx.rows.row(m.name(), &setting, seed, "accuracy", acc, wall));
            rows.push(ctx.rows.row(m.name(), &setting, seed, "gap_retained", (acc - acc_pre) / (acc_ft - acc_pre), wall));
        }
    }
    Ok(rows)
}

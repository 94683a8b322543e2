use std::time::Instant;

use serde::{Deserialize, Serialize};

use super::Context;
use crate::error::LabResult;
use crate::experiments::continual::{ContinualExperiment, ContinualMethod, ContinualRun};
use crate::pool::fan_out;
use crate::report::ReportRow;

fn default_methods() -> Vec<ContinualMethod> {
    vec![ContinualMethod::Baseline, ContinualMethod::Fisher, ContinualMethod::Squisher]
}

fn default_sweep() -> Vec<f64> {
    vec![0.95, 0.999]
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EwcCommand {
    pub stream: ContinualExperiment,
    #[serde(default = "default_methods")]
    pub methods: Vec<ContinualMethod>,
    /// Values of `stream.lambda` to sweep; empty runs `stream.lambda` alone.
    #[serde(default)]
    pub lambda_sweep: Vec<f64>,
}

impl EwcCommand {
    pub fn validate(&self) -> Vec<String> {
        let mut p: Vec<String> = self.stream.validate().into_iter().map(|s| format!("stream.{s}")).collect();
        if self.methods.is_empty() {
            p.push("methods: at least one method is required".into());
        }
        for l in &self.lambda_sweep {
            if !(*l >= 0.0 && l.is_finite()) {
                p.push(format!("lambda_sweep: {l} is not a finite value >= 0"));
            }
        }
        p
    }

    fn lambdas(&self) -> Vec<f64> {
        if self.lambda_sweep.is_empty() {
            vec![self.stream.lambda]
        } else {
            self.lambda_sweep.clone()
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AblateCommand {
    pub stream: ContinualExperiment,
    #[serde(default = "default_sweep")]
    pub beta2_sweep: Vec<f64>,
}

impl AblateCommand {
    pub fn validate(&self) -> Vec<String> {
        let mut p: Vec<String> = self.stream.validate().into_iter().map(|s| format!("stream.{s}")).collect();
        for b in &self.beta2_sweep {
            if !(0.0..1.0).contains(b) {
                p.push(format!("beta2_sweep: {b} is outside [0, 1)"));
            }
        }
        p
    }

    pub fn methods(&self) -> Vec<ContinualMethod> {
        let mut m = vec![
            ContinualMethod::Baseline,
            ContinualMethod::Fisher,
            ContinualMethod::Squisher,
            ContinualMethod::SquisherNoNorm,
            ContinualMethod::Joint,
        ];
        m.extend(self.beta2_sweep.iter().map(|&b| ContinualMethod::SquisherBeta2(b)));
        m
    }
}

fn run_grid(
    ctx: &mut Context,
    stream: &ContinualExperiment,
    methods: &[ContinualMethod],
    lambdas: &[f64],
) -> LabResult<Vec<ReportRow>> {
    let seeds = ctx.common.seeds();
    let mut jobs: Vec<(ContinualMethod, f64, u64)> = Vec::new();
    for &m in methods {
        // The baseline ignores lambda, so it runs once.
        let ls = if m == ContinualMethod::Baseline { &lambdas[..1] } else { lambdas };
        for &l in ls {
            jobs.extend(seeds.iter().map(|&s| (m, l, s)));
        }
    }
    let index: Vec<u64> = (0..jobs.len() as u64).collect();
    let runs: Vec<(ContinualRun, f64, f64)> = fan_out(&index, |i| {
        let (m, l, s) = jobs[i as usize];
        let exp = ContinualExperiment { lambda: l, ..stream.clone() };
        let t = Instant::now();
        let r = exp.run(m, s)?;
        Ok((r, l, t.elapsed().as_secs_f64()))
    })?;
    let sweep = lambdas.len() > 1;
    let mut rows = Vec::new();
    for (r, l, wall) in runs {
        let label = r.method.label();
        let name = if sweep {
            format!("accuracy-{label}-lambda{l}-seed{}.csv", r.seed)
        } else {
            format!("accuracy-{label}-seed{}.csv", r.seed)
        };
        ctx.write_text(&name, &r.matrix_csv)?;
        let setting = format!("lambda={l}");
        rows.push(ctx.rows.row(&label, &setting, r.seed, "mean_final_accuracy", r.mean_final_accuracy, wall));
    }
    Ok(rows)
}

pub(super) fn ewc(ctx: &mut Context, cmd: &EwcCommand) -> LabResult<Vec<ReportRow>> {
    run_grid(ctx, &cmd.stream, &cmd.methods, &cmd.lambdas())
}

pub(super) fn ablate(ctx: &mut Context, cmd: &AblateCommand) -> LabResult<Vec<ReportRow>> {
    run_grid(ctx, &cmd.stream, &cmd.methods(), &[cmd.stream.lambda])
}

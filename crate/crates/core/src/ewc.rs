//! Elastic weight consolidation and a task-incremental training driver.
//!
//! Anchors always hold the importance in the mean-reduced convention. For
//! accumulator-derived anchors, [`LambdaMode::SquisherAuto`] multiplies the
//! configured strength by the anchor's `N`, so one `lambda` serves both the
//! Fisher and the Squisher.

use serde::{Deserialize, Serialize};

use crate::data::{Dataset, TaskStream};
use crate::error::{Error, Result};
use crate::fisher::{self, rescale, FisherDiagonal, FisherKind, Scaling};
use crate::nn::{self, MlpSpec};
use crate::optim::OptimizerKind;
use crate::params::ParamVector;
use crate::rng::{self, purpose};
use crate::train::{self, TrainConfig};

#[derive(Debug, Clone, PartialEq)]
pub struct EwcAnchor {
    pub task_id: usize,
    pub theta_hat: ParamVector,
    fisher: FisherDiagonal,
}

impl EwcAnchor {
    /// Converts `fisher` to the mean-reduced convention on ingest.
    pub fn new(task_id: usize, theta_hat: ParamVector, fisher: &FisherDiagonal) -> Result<Self> {
        theta_hat
            .ensure_compatible(&fisher.values, "anchor: Fisher vs parameters")
            .map_err(|e| Error::Input(e.to_string()))?;
        Ok(Self {
            task_id,
            theta_hat,
            fisher: rescale(fisher, Scaling::MeanOverN),
        })
    }

    pub fn fisher(&self) -> &FisherDiagonal {
        &self.fisher
    }

    /// Whether the importance came from the optimizer's accumulator (or its
    /// EMA-free counterpart) and so lives on the accumulator's scale.
    pub fn is_accumulator_scaled(&self) -> bool {
        matches!(self.fisher.kind, FisherKind::Squisher | FisherKind::JointBatched)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum LambdaMode {
    /// Every anchor uses `lambda` as given.
    #[default]
    Fisher,
    /// Accumulator-scaled anchors use `N * lambda`.
    SquisherAuto,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum AnchorPolicy {
    /// One quadratic per past task.
    #[default]
    PerTask,
    /// A single anchor at the latest parameters whose importance is the sum
    /// of all past importances.
    RunningSum,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EwcConfig {
    pub lambda: f64,
    #[serde(default)]
    pub lambda_mode: LambdaMode,
    #[serde(default)]
    pub anchor_policy: AnchorPolicy,
}

impl EwcConfig {
    pub fn new(lambda: f64, lambda_mode: LambdaMode) -> Result<Self> {
        let cfg = Self { lambda, lambda_mode, anchor_policy: AnchorPolicy::PerTask };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.lambda >= 0.0 && self.lambda.is_finite()) {
            return Err(Error::Input(format!("lambda must be >= 0, got {}", self.lambda)));
        }
        Ok(())
    }

    /// Strength applied to `anchor`.
    pub fn effective_lambda(&self, anchor: &EwcAnchor) -> f64 {
        match self.lambda_mode {
            LambdaMode::SquisherAuto if anchor.is_accumulator_scaled() => {
                self.lambda * anchor.fisher.n_data as f64
            }
            _ => self.lambda,
        }
    }
}

/// `sum_a (lambda_a / 2) sum_i F_ai (theta_i - theta_hat_ai)^2` and its gradient.
pub fn ewc_penalty(params: &ParamVector, anchors: &[EwcAnchor], cfg: &EwcConfig) -> Result<(f64, ParamVector)> {
    cfg.validate()?;
    let mut value = 0.0;
    let mut grad = ParamVector::zeros_like(params);
    for a in anchors {
        params
            .ensure_compatible(&a.theta_hat, "EWC anchor vs parameters")
            .map_err(|e| Error::Input(e.to_string()))?;
        if a.fisher.scaling != Scaling::MeanOverN {
            return Err(Error::Input("EWC anchor is not in the mean-reduced convention".into()));
        }
        let lambda = cfg.effective_lambda(a);
        let mut quad = 0.0;
        let g = grad.values_mut();
        for (i, ((p, h), f)) in params
            .values()
            .iter()
            .zip(a.theta_hat.values())
            .zip(a.fisher.values())
            .enumerate()
        {
            let d = p - h;
            quad += f * d * d;
            g[i] += lambda * f * d;
        }
        value += 0.5 * lambda * quad;
    }
    Ok((value, grad))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FisherSource {
    /// No regularization.
    None,
    /// Empirical Fisher of the task's training split.
    Fisher,
    /// The task's optimizer accumulator.
    Squisher,
    /// Squared mini-batch gradients over one pass, no moving average.
    Joint,
}

impl FisherSource {
    pub fn name(self) -> &'static str {
        match self {
            FisherSource::None => "none",
            FisherSource::Fisher => "fisher",
            FisherSource::Squisher => "squisher",
            FisherSource::Joint => "joint",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ContinualConfig {
    pub train: TrainConfig,
    pub ewc: EwcConfig,
    #[serde(default = "default_true")]
    pub bias_corrected: bool,
}

fn default_true() -> bool {
    true
}

/// `acc[stage][task]`: accuracy on task `task` after training through `stage`
/// (`None` for tasks not yet seen).
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct AccuracyMatrix {
    pub acc: Vec<Vec<Option<f64>>>,
}

impl AccuracyMatrix {
    pub fn final_accuracies(&self) -> Vec<f64> {
        self.acc.last().map(|r| r.iter().flatten().copied().collect()).unwrap_or_default()
    }

    pub fn mean_final(&self) -> f64 {
        let f = self.final_accuracies();
        f.iter().sum::<f64>() / f.len().max(1) as f64
    }

    /// `stage,task,accuracy` rows, header first.
    pub fn to_csv(&self) -> String {
        let mut s = String::from("stage,task,accuracy\n");
        for (stage, row) in self.acc.iter().enumerate() {
            for (task, a) in row.iter().enumerate() {
                if let Some(a) = a {
                    s.push_str(&format!("{stage},{task},{a}\n"));
                }
            }
        }
        s
    }
}

#[derive(Debug, Clone)]
pub struct ContinualOutcome {
    pub matrix: AccuracyMatrix,
    pub params: ParamVector,
    pub anchors: Vec<EwcAnchor>,
}

fn importance(
    source: FisherSource,
    spec: &MlpSpec,
    outcome: &train::TrainOutcome,
    data: &Dataset,
    cfg: &ContinualConfig,
) -> Result<Option<FisherDiagonal>> {
    Ok(match source {
        FisherSource::None => None,
        FisherSource::Fisher => {
            Some(fisher::empirical_fisher(spec, &outcome.params, data, Scaling::SumOverN)?)
        }
        FisherSource::Squisher => Some(fisher::squisher_from_state(
            &outcome.state,
            data.len(),
            cfg.train.batch_size,
            cfg.bias_corrected,
        )?),
        FisherSource::Joint => Some(fisher::joint_batched_fisher(
            spec,
            &outcome.params,
            data,
            cfg.train.batch_size,
        )?),
    })
}

fn install(anchors: &mut Vec<EwcAnchor>, policy: AnchorPolicy, new: EwcAnchor) -> Result<()> {
    match (policy, anchors.pop()) {
        (AnchorPolicy::RunningSum, Some(prev)) => {
            let summed: Vec<f64> = prev
                .fisher
                .values()
                .iter()
                .zip(new.fisher.values())
                .map(|(a, b)| a + b)
                .collect();
            let mut fisher = new.fisher.clone();
            fisher.values = fisher.values.with_values(summed)?;
            anchors.push(EwcAnchor { fisher, ..new });
        }
        (_, prev) => {
            anchors.extend(prev);
            anchors.push(new);
        }
    }
    Ok(())
}

/// Trains the tasks in order with a fresh optimizer per task, anchoring after
/// each task, and evaluates every seen task after every stage.
pub fn run_task_incremental(
    spec: &MlpSpec,
    stream: &TaskStream,
    cfg: &ContinualConfig,
    source: FisherSource,
    seed: u64,
) -> Result<ContinualOutcome> {
    cfg.ewc.validate()?;
    if stream.tasks.is_empty() {
        return Err(Error::Input("empty task stream".into()));
    }
    if source == FisherSource::Squisher && cfg.train.optimizer == OptimizerKind::Sgd {
        return Err(Error::Unavailable("the Squisher needs an adaptive optimizer, not SGD".into()));
    }
    let mut params = nn::init_params(spec, &mut rng::stream(seed, &[purpose::INIT]));
    let mut anchors: Vec<EwcAnchor> = Vec::new();
    let mut acc = Vec::with_capacity(stream.tasks.len());
    for (t, task) in stream.tasks.iter().enumerate() {
        let outcome = if anchors.is_empty() || source == FisherSource::None {
            train::train(spec, params, &task.train, &cfg.train, seed, t as u64, None)?
        } else {
            let penalty = |p: &ParamVector| ewc_penalty(p, &anchors, &cfg.ewc);
            train::train(spec, params, &task.train, &cfg.train, seed, t as u64, Some(&penalty))?
        };
        if let Some(f) = importance(source, spec, &outcome, &task.train, cfg)? {
            install(
                &mut anchors,
                cfg.ewc.anchor_policy,
                EwcAnchor::new(task.task_id, outcome.params.clone(), &f)?,
            )?;
        }
        params = outcome.params;
        let mut row = vec![None; stream.tasks.len()];
        for (s, seen) in stream.tasks[..=t].iter().enumerate() {
            row[s] = Some(nn::accuracy(spec, &params, &seen.test)?);
        }
        acc.push(row);
    }
    Ok(ContinualOutcome { matrix: AccuracyMatrix { acc }, params, anchors })
}

//! Mini-batch training loop shared by the CLI and the continual-learning driver.

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::nn::{self, MlpSpec};
use crate::optim::{Checkpoint, Hyperparams, OptimizerKind, OptimizerState, Provenance};
use crate::params::ParamVector;
use crate::rng::{self, purpose};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub optimizer: OptimizerKind,
    #[serde(default)]
    pub hyper: Hyperparams,
    pub batch_size: usize,
    pub steps: u64,
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        self.hyper.validate()?;
        if self.batch_size == 0 {
            return Err(Error::Input("batch_size must be positive".into()));
        }
        Ok(())
    }
}

/// Extra objective term evaluated at the current parameters: `(value, gradient)`.
pub type Penalty<'a> = dyn Fn(&ParamVector) -> Result<(f64, ParamVector)> + 'a;

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub params: ParamVector,
    pub state: OptimizerState,
    /// Mean data loss of each step's batch.
    pub losses: Vec<f64>,
}

/// Batches of a fresh shuffle per epoch; a trailing partial batch is dropped
/// so every step sees exactly `batch_size` examples.
pub struct BatchSchedule {
    order: Vec<usize>,
    batch_size: usize,
    cursor: usize,
    rng: rng::Rng,
}

impl BatchSchedule {
    pub fn new(n: usize, batch_size: usize, seed: u64, stream: u64) -> Result<Self> {
        if batch_size == 0 || batch_size > n {
            return Err(Error::Input(format!(
                "batch size {batch_size} does not fit a dataset of {n} examples"
            )));
        }
        let mut s = Self {
            order: (0..n).collect(),
            batch_size,
            cursor: n,
            rng: rng::stream(seed, &[purpose::SHUFFLE, stream]),
        };
        s.cursor = s.order.len();
        Ok(s)
    }

    pub fn next_batch(&mut self) -> &[usize] {
        if self.cursor + self.batch_size > self.order.len() {
            self.order.shuffle(&mut self.rng);
            self.cursor = 0;
        }
        let b = &self.order[self.cursor..self.cursor + self.batch_size];
        self.cursor += self.batch_size;
        b
    }
}

/// Runs `cfg.steps` optimizer steps from `params` with a fresh optimizer state.
pub fn train(
    spec: &MlpSpec,
    params: ParamVector,
    data: &Dataset,
    cfg: &TrainConfig,
    seed: u64,
    stream: u64,
    penalty: Option<&Penalty<'_>>,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    let state = OptimizerState::new(cfg.optimizer, &params, cfg.hyper)?;
    train_from(spec, params, state, data, cfg, seed, stream, penalty)
}

/// As [`train`], continuing from an existing optimizer state.
#[allow(clippy::too_many_arguments)]
pub fn train_from(
    spec: &MlpSpec,
    mut params: ParamVector,
    mut state: OptimizerState,
    data: &Dataset,
    cfg: &TrainConfig,
    seed: u64,
    stream: u64,
    penalty: Option<&Penalty<'_>>,
) -> Result<TrainOutcome> {
    spec.check_params(&params)?;
    let mut schedule = BatchSchedule::new(data.len(), cfg.batch_size, seed, stream)?;
    let mut losses = Vec::with_capacity(cfg.steps as usize);
    for _ in 0..cfg.steps {
        let batch = schedule.next_batch();
        let (loss, mut grad) = nn::batch_loss_and_grad(spec, &params, data, batch)?;
        if let Some(p) = penalty {
            let (_, pg) = p(&params)?;
            for (g, q) in grad.values_mut().iter_mut().zip(pg.values()) {
                *g += q;
            }
        }
        state.step_in_place(&mut params, &grad)?;
        losses.push(loss);
    }
    Ok(TrainOutcome { params, state, losses })
}

/// Initializes, trains and packages a checkpoint.
pub fn train_checkpoint(
    spec: &MlpSpec,
    data: &Dataset,
    cfg: &TrainConfig,
    seed: u64,
    dataset_id: &str,
) -> Result<Checkpoint> {
    let init = nn::init_params(spec, &mut rng::stream(seed, &[purpose::INIT]));
    let out = train(spec, init, data, cfg, seed, 0, None)?;
    Checkpoint::new(
        spec.clone(),
        out.params,
        out.state,
        Provenance {
            dataset_id: dataset_id.to_string(),
            dataset_size: data.len(),
            batch_size: cfg.batch_size,
            steps: cfg.steps,
            seed,
            parents: Vec::new(),
        },
    )
}

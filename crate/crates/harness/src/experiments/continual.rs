//! Task-incremental EWC experiments and the accumulator ablations.

use serde::{Deserialize, Serialize};
use squisher_core::data::{generate, GeneratorSpec, Scenario};
use squisher_core::ewc::{
    run_task_incremental, AnchorPolicy, ContinualConfig, EwcConfig, FisherSource, LambdaMode,
};
use squisher_core::train::TrainConfig;
use squisher_core::{Activation, Head, MlpSpec, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ContinualExperiment {
    pub generator: GeneratorSpec,
    pub hidden: Vec<usize>,
    #[serde(default = "default_activation")]
    pub activation: Activation,
    pub train: TrainConfig,
    /// Strength for Fisher anchors; accumulator anchors get `N * lambda`.
    pub lambda: f64,
    #[serde(default = "default_true")]
    pub bias_corrected: bool,
    #[serde(default)]
    pub anchor_policy: AnchorPolicy,
    #[serde(default)]
    pub scenario: Scenario,
}

fn default_activation() -> Activation {
    Activation::Relu
}

pub(crate) fn default_true() -> bool {
    true
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ContinualMethod {
    Baseline,
    Fisher,
    Squisher,
    /// Squisher anchors with `lambda` left untransformed.
    SquisherNoNorm,
    /// Squared mini-batch gradients without the moving average.
    Joint,
    /// Squisher trained and extracted with a different `beta2`.
    SquisherBeta2(f64),
}

impl ContinualMethod {
    pub fn label(&self) -> String {
        match self {
            ContinualMethod::Baseline => "baseline".into(),
            ContinualMethod::Fisher => "fisher".into(),
            ContinualMethod::Squisher => "squisher".into(),
            ContinualMethod::SquisherNoNorm => "squisher_no_norm".into(),
            ContinualMethod::Joint => "joint".into(),
            ContinualMethod::SquisherBeta2(b) => format!("squisher_beta2={b}"),
        }
    }
}

#[derive(Debug, Clone)]
pub struct ContinualRun {
    pub method: ContinualMethod,
    pub seed: u64,
    pub mean_final_accuracy: f64,
    pub matrix_csv: String,
}

impl ContinualExperiment {
    pub fn validate(&self) -> Vec<String> {
        let mut problems = Vec::new();
        if let Err(e) = self.generator.validate() {
            problems.push(format!("generator: {e}"));
        }
        if let Err(e) = self.train.validate() {
            problems.push(format!("train: {e}"));
        }
        if !(self.lambda >= 0.0 && self.lambda.is_finite()) {
            problems.push(format!("lambda: must be >= 0, got {}", self.lambda));
        }
        if self.hidden.contains(&0) {
            problems.push("hidden: layer widths must be positive".into());
        }
        problems
    }

    pub fn run(&self, method: ContinualMethod, seed: u64) -> Result<ContinualRun> {
        let mut gen = self.generator.clone();
        gen.seed = gen.seed.wrapping_add(seed);
        let stream = generate(&gen)?.with_scenario(self.scenario);
        let mut sizes = vec![gen.dims];
        sizes.extend(&self.hidden);
        sizes.push(stream.output_dim(self.scenario));
        let spec = MlpSpec::new(sizes, self.activation, Head::SoftmaxXent)?;

        let mut train = self.train.clone();
        let (source, mode) = match method {
            ContinualMethod::Baseline => (FisherSource::None, LambdaMode::Fisher),
            ContinualMethod::Fisher => (FisherSource::Fisher, LambdaMode::Fisher),
            ContinualMethod::Squisher => (FisherSource::Squisher, LambdaMode::SquisherAuto),
            ContinualMethod::SquisherNoNorm => (FisherSource::Squisher, LambdaMode::Fisher),
            ContinualMethod::Joint => (FisherSource::Joint, LambdaMode::SquisherAuto),
            ContinualMethod::SquisherBeta2(b) => {
                train.hyper.beta2 = b;
                (FisherSource::Squisher, LambdaMode::SquisherAuto)
            }
        };
        let cfg = ContinualConfig {
            train,
            ewc: EwcConfig {
                lambda: self.lambda,
                lambda_mode: mode,
                anchor_policy: self.anchor_policy,
            },
            bias_corrected: self.bias_corrected,
        };
        let out = run_task_incremental(&spec, &stream, &cfg, source, seed)?;
        Ok(ContinualRun {
            method,
            seed,
            mean_final_accuracy: out.matrix.mean_final(),
            matrix_csv: out.matrix.to_csv(),
        })
    }
}

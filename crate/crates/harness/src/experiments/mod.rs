//! In-memory experiment drivers behind the CLI commands and the acceptance suite.

pub mod continual;
pub mod embedding;
pub mod merging;
pub mod pruning;
pub mod reset;

use serde::{Deserialize, Serialize};
use squisher_core::fisher::{self, FisherDiagonal, Scaling};
use squisher_core::optim::Checkpoint;
use squisher_core::{Activation, Head, MlpSpec, Result};

use squisher_core::data::Dataset;

/// Network shape shared by the experiment configs: input and output widths
/// come from the data.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub hidden: Vec<usize>,
    #[serde(default = "default_activation")]
    pub activation: Activation,
}

fn default_activation() -> Activation {
    Activation::Relu
}

impl ModelConfig {
    pub fn spec(&self, input: usize, output: usize) -> Result<MlpSpec> {
        let mut sizes = vec![input];
        sizes.extend(&self.hidden);
        sizes.push(output);
        MlpSpec::new(sizes, self.activation, Head::SoftmaxXent)
    }
}

/// Importance source compared against a Fisher-free baseline.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Importance {
    Fisher,
    Squisher,
    Baseline,
}

impl Importance {
    pub const ALL: [Importance; 3] = [Importance::Fisher, Importance::Squisher, Importance::Baseline];

    pub fn name(self) -> &'static str {
        match self {
            Importance::Fisher => "fisher",
            Importance::Squisher => "squisher",
            Importance::Baseline => "baseline",
        }
    }
}

/// Empirical Fisher on `data` or the checkpoint's Squisher; `None` for the
/// baseline.
pub fn importance_of(
    method: Importance,
    ckpt: &Checkpoint,
    data: &Dataset,
    bias_corrected: bool,
) -> Result<Option<FisherDiagonal>> {
    Ok(match method {
        Importance::Fisher => Some(fisher::empirical_fisher(
            &ckpt.mlp_spec,
            &ckpt.params,
            data,
            Scaling::SumOverN,
        )?),
        Importance::Squisher => Some(fisher::squisher(ckpt, bias_corrected)?),
        Importance::Baseline => None,
    })
}

pub fn mean(xs: &[f64]) -> f64 {
    xs.iter().sum::<f64>() / xs.len().max(1) as f64
}

//! Global unstructured pruning by `rho = theta^2 F / 2` versus random masks.

use serde::{Deserialize, Serialize};
use squisher_core::data::{generate, GeneratorSpec};
use squisher_core::nn;
use squisher_core::rng::{self, purpose};
use squisher_core::sparsify::{apply_prune, kept_count, pruning_stats, random_mask, top_k_mask};
use squisher_core::train::{train_checkpoint, TrainConfig};
use squisher_core::{Error, Result};

use super::{importance_of, Importance, ModelConfig};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PruningExperiment {
    pub generator: GeneratorSpec,
    pub model: ModelConfig,
    pub train: TrainConfig,
    /// Fraction of parameters set to zero.
    pub prune_fraction: f64,
    #[serde(default = "super::continual::default_true")]
    pub bias_corrected: bool,
}

#[derive(Debug, Clone)]
pub struct PruningRun {
    pub seed: u64,
    pub dense_accuracy: f64,
    /// Test accuracy after pruning, per method.
    pub pruned: Vec<(Importance, f64)>,
}

impl PruningExperiment {
    pub fn validate(&self) -> Vec<String> {
        let mut problems = Vec::new();
        if let Err(e) = self.generator.validate() {
            problems.push(format!("generator: {e}"));
        }
        if let Err(e) = self.train.validate() {
            problems.push(format!("train: {e}"));
        }
        if !(0.0..=1.0).contains(&self.prune_fraction) {
            problems.push(format!("prune_fraction: must lie in [0, 1], got {}", self.prune_fraction));
        }
        problems
    }

    pub fn run(&self, seed: u64) -> Result<PruningRun> {
        if !(0.0..=1.0).contains(&self.prune_fraction) {
            return Err(Error::Input("prune_fraction must lie in [0, 1]".into()));
        }
        let mut gen = self.generator.clone();
        gen.seed = gen.seed.wrapping_add(seed);
        let task = generate(&gen)?.tasks.remove(0);
        let spec = self.model.spec(gen.dims, gen.classes)?;
        let ckpt = train_checkpoint(&spec, &task.train, &self.train, seed, "pruning")?;
        let dense_accuracy = nn::accuracy(&spec, &ckpt.params, &task.test)?;
        let k = kept_count(ckpt.params.len(), 1.0 - self.prune_fraction)?;
        let mut pruned = Vec::new();
        for method in Importance::ALL {
            let mask = match importance_of(method, &ckpt, &task.train, self.bias_corrected)? {
                Some(f) => top_k_mask(pruning_stats(&ckpt.params, &f)?.rho.values(), k)?,
                None => random_mask(ckpt.params.len(), k, &mut rng::stream(seed, &[purpose::MASK]))?,
            };
            let params = apply_prune(&ckpt.params, &mask)?;
            pruned.push((method, nn::accuracy(&spec, &params, &task.test)?));
        }
        Ok(PruningRun { seed, dense_accuracy, pruned })
    }
}

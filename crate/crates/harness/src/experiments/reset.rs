//! Sparse fine-tuning analogue: reset every parameter outside a mask back to
//! its pretrained value and measure how much of the fine-tuning gain survives.

use serde::{Deserialize, Serialize};
use squisher_core::data::{generate, GeneratorSpec};
use squisher_core::nn;
use squisher_core::optim::{Checkpoint, Provenance};
use squisher_core::rng::{self, purpose};
use squisher_core::sparsify::{apply_fish_reset, kept_count, random_mask, top_k_mask};
use squisher_core::train::{train, train_checkpoint, TrainConfig};
use squisher_core::{Error, Result};

use super::{importance_of, Importance, ModelConfig};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ResetExperiment {
    pub pretrain: GeneratorSpec,
    pub finetune: GeneratorSpec,
    pub model: ModelConfig,
    pub pretrain_train: TrainConfig,
    pub finetune_train: TrainConfig,
    /// Fraction of parameters that keep their fine-tuned value.
    pub keep_fraction: f64,
    #[serde(default = "super::continual::default_true")]
    pub bias_corrected: bool,
}

#[derive(Debug, Clone)]
pub struct ResetRun {
    pub seed: u64,
    pub pretrained_accuracy: f64,
    pub finetuned_accuracy: f64,
    pub reset: Vec<(Importance, f64)>,
}

impl ResetRun {
    /// `(reset - pretrained) / (finetuned - pretrained)` per method.
    pub fn retained(&self) -> Vec<(Importance, f64)> {
        let gap = self.finetuned_accuracy - self.pretrained_accuracy;
        self.reset
            .iter()
            .map(|(m, a)| (*m, (a - self.pretrained_accuracy) / gap))
            .collect()
    }
}

impl ResetExperiment {
    pub fn validate(&self) -> Vec<String> {
        let mut problems = Vec::new();
        for (name, g) in [("pretrain", &self.pretrain), ("finetune", &self.finetune)] {
            if let Err(e) = g.validate() {
                problems.push(format!("{name}: {e}"));
            }
        }
        if self.pretrain.dims != self.finetune.dims || self.pretrain.classes != self.finetune.classes {
            problems.push("finetune: dims and classes must match pretrain".into());
        }
        for (name, t) in [("pretrain_train", &self.pretrain_train), ("finetune_train", &self.finetune_train)] {
            if let Err(e) = t.validate() {
                problems.push(format!("{name}: {e}"));
            }
        }
        if !(0.0..=1.0).contains(&self.keep_fraction) {
            problems.push(format!("keep_fraction: must lie in [0, 1], got {}", self.keep_fraction));
        }
        problems
    }

    pub fn run(&self, seed: u64) -> Result<ResetRun> {
        if !self.validate().is_empty() {
            return Err(Error::Input(self.validate().join("; ")));
        }
        let shift = |g: &GeneratorSpec| GeneratorSpec { seed: g.seed.wrapping_add(seed), ..g.clone() };
        let source = generate(&shift(&self.pretrain))?.tasks.remove(0);
        let target = generate(&shift(&self.finetune))?.tasks.remove(0);
        let spec = self.model.spec(self.pretrain.dims, self.pretrain.classes)?;
        let pre = train_checkpoint(&spec, &source.train, &self.pretrain_train, seed, "pretrain")?;
        let ft = train(&spec, pre.params.clone(), &target.train, &self.finetune_train, seed, 1, None)?;
        let ft = Checkpoint::new(
            spec.clone(),
            ft.params,
            ft.state,
            Provenance {
                dataset_id: "finetune".into(),
                dataset_size: target.train.len(),
                batch_size: self.finetune_train.batch_size,
                steps: self.finetune_train.steps,
                seed,
                parents: vec![pre.checksum()?],
            },
        )?;
        let k = kept_count(ft.params.len(), self.keep_fraction)?;
        let mut reset = Vec::new();
        for method in Importance::ALL {
            let mask = match importance_of(method, &ft, &target.train, self.bias_corrected)? {
                Some(f) => top_k_mask(f.values(), k)?,
                None => random_mask(ft.params.len(), k, &mut rng::stream(seed, &[purpose::MASK]))?,
            };
            let params = apply_fish_reset(&ft.params, &pre.params, &mask)?;
            reset.push((method, nn::accuracy(&spec, &params, &target.test)?));
        }
        Ok(ResetRun {
            seed,
            pretrained_accuracy: nn::accuracy(&spec, &pre.params, &target.test)?,
            finetuned_accuracy: nn::accuracy(&spec, &ft.params, &target.test)?,
            reset,
        })
    }
}

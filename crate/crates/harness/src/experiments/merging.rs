//! Merge models fine-tuned from a shared base on different class subsets and
//! evaluate the merge on the union of their test sets.

use serde::{Deserialize, Serialize};
use squisher_core::data::{generate, Dataset, GeneratorKind, GeneratorSpec};
use squisher_core::merge::{fisher_merge, linear_merge, ubgm_merge, MergeInput, DEFAULT_EPSILON};
use squisher_core::nn;
use squisher_core::optim::{Checkpoint, Provenance};
use squisher_core::train::{train, train_checkpoint, TrainConfig};
use squisher_core::{Error, Result};

use super::{importance_of, Importance, ModelConfig};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MergeRule {
    /// Importance-weighted average of the models.
    Weighted,
    /// Base-anchored merge of task vectors.
    Ubgm,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MergingExperiment {
    /// A `split_classes` stream: one fine-tuned model per task.
    pub generator: GeneratorSpec,
    pub model: ModelConfig,
    pub pretrain: TrainConfig,
    pub finetune: TrainConfig,
    #[serde(default = "default_epsilon")]
    pub epsilon: f64,
    #[serde(default = "super::continual::default_true")]
    pub bias_corrected: bool,
}

fn default_epsilon() -> f64 {
    DEFAULT_EPSILON
}

#[derive(Debug, Clone)]
pub struct MergingRun {
    pub seed: u64,
    /// Union-test accuracy of each individual fine-tuned model.
    pub individual: Vec<f64>,
    pub merged: Vec<(Importance, MergeRule, f64)>,
}

impl MergingExperiment {
    pub fn validate(&self) -> Vec<String> {
        let mut problems = Vec::new();
        if self.generator.kind != GeneratorKind::SplitClasses {
            problems.push("generator.kind: merging needs a split_classes stream".into());
        }
        if let Err(e) = self.generator.validate() {
            problems.push(format!("generator: {e}"));
        }
        for (name, t) in [("pretrain", &self.pretrain), ("finetune", &self.finetune)] {
            if let Err(e) = t.validate() {
                problems.push(format!("{name}: {e}"));
            }
        }
        if !(self.epsilon >= 0.0) {
            problems.push("epsilon: must be >= 0".into());
        }
        problems
    }

    pub fn run(&self, seed: u64) -> Result<MergingRun> {
        let problems = self.validate();
        if !problems.is_empty() {
            return Err(Error::Input(problems.join("; ")));
        }
        let gen = GeneratorSpec { seed: self.generator.seed.wrapping_add(seed), ..self.generator.clone() };
        let stream = generate(&gen)?;
        let all_train = Dataset::concat(&stream.tasks.iter().map(|t| t.train.clone()).collect::<Vec<_>>())?;
        let all_test = Dataset::concat(&stream.tasks.iter().map(|t| t.test.clone()).collect::<Vec<_>>())?;
        let spec = self.model.spec(gen.dims, gen.classes)?;
        let base = train_checkpoint(&spec, &all_train, &self.pretrain, seed, "merge-base")?;

        let mut models = Vec::new();
        for (i, task) in stream.tasks.iter().enumerate() {
            let out = train(&spec, base.params.clone(), &task.train, &self.finetune, seed, 1 + i as u64, None)?;
            models.push((
                Checkpoint::new(
                    spec.clone(),
                    out.params,
                    out.state,
                    Provenance {
                        dataset_id: format!("task{i}"),
                        dataset_size: task.train.len(),
                        batch_size: self.finetune.batch_size,
                        steps: self.finetune.steps,
                        seed,
                        parents: vec![base.checksum()?],
                    },
                )?,
                &task.train,
            ));
        }
        let individual = models
            .iter()
            .map(|(c, _)| nn::accuracy(&spec, &c.params, &all_test))
            .collect::<Result<Vec<_>>>()?;

        let mut merged = Vec::new();
        let linear = linear_merge(&models.iter().map(|(c, _)| c.params.clone()).collect::<Vec<_>>())?;
        merged.push((Importance::Baseline, MergeRule::Weighted, nn::accuracy(&spec, &linear, &all_test)?));
        for method in [Importance::Fisher, Importance::Squisher] {
            let mut pairs = Vec::new();
            for (c, data) in &models {
                let f = importance_of(method, c, data, self.bias_corrected)?.expect("importance");
                pairs.push((c.params.clone(), f));
            }
            let base_f = importance_of(method, &base, &all_train, self.bias_corrected)?.expect("importance");
            let input = MergeInput::new(pairs).with_epsilon(self.epsilon);
            let weighted = fisher_merge(&input)?;
            merged.push((method, MergeRule::Weighted, nn::accuracy(&spec, &weighted, &all_test)?));
            let ubgm = ubgm_merge(&input.with_base(base.params.clone(), base_f))?;
            merged.push((method, MergeRule::Ubgm, nn::accuracy(&spec, &ubgm, &all_test)?));
        }
        Ok(MergingRun { seed, individual, merged })
    }
}

//! Transfer-source ranking with Fisher-based task embeddings.
//!
//! Every task trains the same architecture from the same initialization;
//! its embedding is the per-group mean of the mean-reduced importance.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use squisher_core::data::{generate, GeneratorSpec};
use squisher_core::embed::{embed_task, mean_reciprocal_rank, rank_by_size, rank_sources, Ranking, TaskEmbedding};
use squisher_core::fisher::{rescale, Scaling};
use squisher_core::nn;
use squisher_core::optim::{Checkpoint, Provenance};
use squisher_core::rng::{self, purpose};
use squisher_core::train::{train, TrainConfig};
use squisher_core::{Error, Result};

use super::{importance_of, Importance, ModelConfig};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NamedTask {
    pub name: String,
    pub generator: GeneratorSpec,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Query {
    pub target: String,
    /// The source that should rank first.
    pub gold: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EmbeddingExperiment {
    pub model: ModelConfig,
    pub train: TrainConfig,
    /// Output width; every task's labels must fit.
    pub classes: usize,
    pub tasks: Vec<NamedTask>,
    pub sources: Vec<String>,
    pub queries: Vec<Query>,
    #[serde(default = "super::continual::default_true")]
    pub bias_corrected: bool,
}

#[derive(Debug, Clone)]
pub struct EmbeddingRun {
    pub seed: u64,
    /// Rankings per method (the baseline ranks by dataset size).
    pub rankings: Vec<(Importance, Vec<Ranking>)>,
    pub embeddings: Vec<(Importance, BTreeMap<String, TaskEmbedding>)>,
}

impl EmbeddingRun {
    pub fn mrr(&self, method: Importance) -> Result<f64> {
        let r = self
            .rankings
            .iter()
            .find(|(m, _)| *m == method)
            .ok_or_else(|| Error::Input(format!("no rankings for {}", method.name())))?;
        mean_reciprocal_rank(&r.1)
    }
}

impl EmbeddingExperiment {
    pub fn validate(&self) -> Vec<String> {
        let mut problems = Vec::new();
        let names: Vec<&str> = self.tasks.iter().map(|t| t.name.as_str()).collect();
        let dims = self.tasks.first().map(|t| t.generator.dims);
        for t in &self.tasks {
            if let Err(e) = t.generator.validate() {
                problems.push(format!("tasks.{}: {e}", t.name));
            }
            if Some(t.generator.dims) != dims {
                problems.push(format!("tasks.{}: every task needs the same dims", t.name));
            }
            if t.generator.classes > self.classes {
                problems.push(format!("tasks.{}: more classes than the output width", t.name));
            }
        }
        if self.tasks.is_empty() {
            problems.push("tasks: at least one task is required".into());
        }
        for s in &self.sources {
            if !names.contains(&s.as_str()) {
                problems.push(format!("sources: unknown task `{s}`"));
            }
        }
        for q in &self.queries {
            if !names.contains(&q.target.as_str()) {
                problems.push(format!("queries: unknown target `{}`", q.target));
            }
            if !self.sources.contains(&q.gold) {
                problems.push(format!("queries: gold `{}` is not a source", q.gold));
            }
        }
        if let Err(e) = self.train.validate() {
            problems.push(format!("train: {e}"));
        }
        problems
    }

    pub fn run(&self, seed: u64) -> Result<EmbeddingRun> {
        let problems = self.validate();
        if !problems.is_empty() {
            return Err(Error::Input(problems.join("; ")));
        }
        let dims = self.tasks[0].generator.dims;
        let spec = self.model.spec(dims, self.classes)?;
        let init = nn::init_params(&spec, &mut rng::stream(seed, &[purpose::INIT]));
        let mut embeddings: Vec<(Importance, BTreeMap<String, TaskEmbedding>)> = vec![
            (Importance::Fisher, BTreeMap::new()),
            (Importance::Squisher, BTreeMap::new()),
        ];
        let mut sizes = BTreeMap::new();
        for (i, task) in self.tasks.iter().enumerate() {
            let gen = GeneratorSpec { seed: task.generator.seed.wrapping_add(seed), ..task.generator.clone() };
            let data = generate(&gen)?.tasks.remove(0).train;
            let out = train(&spec, init.clone(), &data, &self.train, seed, i as u64, None)?;
            let ckpt = Checkpoint::new(
                spec.clone(),
                out.params,
                out.state,
                Provenance {
                    dataset_id: task.name.clone(),
                    dataset_size: data.len(),
                    batch_size: self.train.batch_size,
                    steps: self.train.steps,
                    seed,
                    parents: Vec::new(),
                },
            )?;
            for (method, table) in embeddings.iter_mut() {
                let f = importance_of(*method, &ckpt, &data, self.bias_corrected)?.expect("importance");
                table.insert(task.name.clone(), embed_task(&rescale(&f, Scaling::MeanOverN))?);
            }
            sizes.insert(task.name.clone(), data.len());
        }
        let mut rankings = Vec::new();
        for (method, table) in &embeddings {
            let sources: Vec<(String, TaskEmbedding)> =
                self.sources.iter().map(|s| (s.clone(), table[s].clone())).collect();
            let r = self
                .queries
                .iter()
                .map(|q| rank_sources(&q.target, &table[&q.target], &sources, &q.gold))
                .collect::<Result<Vec<_>>>()?;
            rankings.push((*method, r));
        }
        let size_list: Vec<(String, usize)> = self.sources.iter().map(|s| (s.clone(), sizes[s])).collect();
        let baseline = self
            .queries
            .iter()
            .map(|q| rank_by_size(&q.target, &size_list, &q.gold))
            .collect::<Result<Vec<_>>>()?;
        rankings.push((Importance::Baseline, baseline));
        Ok(EmbeddingRun { seed, rankings, embeddings })
    }
}

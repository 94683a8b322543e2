//! WebAssembly bindings for the demo page in `www/`. Every export returns a
//! JSON string so the page needs no generated type definitions.

use serde::Serialize;
use squisher_core::data::{generate, Dataset, GeneratorSpec};
use squisher_core::fisher::{empirical_fisher, squisher, FisherDiagonal, FisherKind, FisherMeta, Scaling};
use squisher_core::merge::{fisher_merge, linear_merge, MergeInput};
use squisher_core::nn::{self, Activation, Head, MlpSpec};
use squisher_core::optim::{Checkpoint, Hyperparams, OptimizerKind};
use squisher_core::params::ParamVector;
use squisher_core::rng::{self, purpose};
use squisher_core::sparsify::{apply_prune, kept_count, pruning_stats, random_mask, top_k_mask};
use squisher_core::train::{train_checkpoint, TrainConfig};
use wasm_bindgen::prelude::*;

type DemoResult<T> = Result<T, String>;

fn err(e: impl std::fmt::Display) -> String {
    e.to_string()
}

fn to_json<T: Serialize>(v: &T) -> DemoResult<String> {
    serde_json::to_string(v).map_err(err)
}

struct Trained {
    ckpt: Checkpoint,
    train: Dataset,
    test: Dataset,
}

fn train_blobs(dims: usize, classes: usize, hidden: usize, beta2: f64, steps: u64, seed: u64) -> DemoResult<Trained> {
    if !(0.0..1.0).contains(&beta2) {
        return Err(format!("beta2 must lie in [0, 1), got {beta2}"));
    }
    let task = generate(&GeneratorSpec::blobs(dims, classes, 80, 1.0, seed))
        .map_err(err)?
        .tasks
        .remove(0);
    let spec = MlpSpec::new(vec![dims, hidden, classes], Activation::Relu, Head::SoftmaxXent).map_err(err)?;
    let cfg = TrainConfig {
        optimizer: OptimizerKind::Adam,
        hyper: Hyperparams { lr: 0.01, beta2, ..Hyperparams::default() },
        batch_size: 16,
        steps,
    };
    let ckpt = train_checkpoint(&spec, &task.train, &cfg, seed, "demo").map_err(err)?;
    Ok(Trained { ckpt, train: task.train, test: task.test })
}

#[derive(Serialize)]
struct Comparison {
    fisher: Vec<f64>,
    squisher: Vec<f64>,
    cosine: f64,
    test_accuracy: f64,
}

fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na: f64 = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb: f64 = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        0.0
    } else {
        dot / (na * nb)
    }
}

/// Trains a small classifier and returns both diagonals (sum over the data).
pub fn compare(beta2: f64, steps: u64, seed: u64) -> DemoResult<String> {
    let t = train_blobs(4, 3, 8, beta2, steps, seed)?;
    let f = empirical_fisher(&t.ckpt.mlp_spec, &t.ckpt.params, &t.train, Scaling::SumOverN).map_err(err)?;
    let s = squisher(&t.ckpt, true).map_err(err)?;
    to_json(&Comparison {
        cosine: cosine(f.values(), s.values()),
        test_accuracy: nn::accuracy(&t.ckpt.mlp_spec, &t.ckpt.params, &t.test).map_err(err)?,
        fisher: f.values().to_vec(),
        squisher: s.values().to_vec(),
    })
}

#[derive(Serialize)]
struct Curve {
    fractions: Vec<f64>,
    fisher: Vec<f64>,
    squisher: Vec<f64>,
    random: Vec<f64>,
}

/// Test accuracy after pruning a growing fraction of weights.
pub fn prune_curve(seed: u64) -> DemoResult<String> {
    let t = train_blobs(8, 4, 32, 0.999, 400, seed)?;
    let spec = &t.ckpt.mlp_spec;
    let params = &t.ckpt.params;
    let fisher = empirical_fisher(spec, params, &t.train, Scaling::SumOverN).map_err(err)?;
    let sq = squisher(&t.ckpt, true).map_err(err)?;
    let rho = |f: &FisherDiagonal| pruning_stats(params, f).map(|s| s.rho.into_values());
    let (rf, rs) = (rho(&fisher).map_err(err)?, rho(&sq).map_err(err)?);
    let mut curve = Curve { fractions: vec![], fisher: vec![], squisher: vec![], random: vec![] };
    let mut rng = rng::stream(seed, &[purpose::MASK]);
    for i in 0..20 {
        let fraction = i as f64 * 0.05;
        let k = kept_count(params.len(), 1.0 - fraction).map_err(err)?;
        let acc = |mask| -> DemoResult<f64> {
            let pruned = apply_prune(params, &mask).map_err(err)?;
            nn::accuracy(spec, &pruned, &t.test).map_err(err)
        };
        curve.fractions.push(fraction);
        curve.fisher.push(acc(top_k_mask(&rf, k).map_err(err)?)?);
        curve.squisher.push(acc(top_k_mask(&rs, k).map_err(err)?)?);
        curve.random.push(acc(random_mask(params.len(), k, &mut rng).map_err(err)?)?);
    }
    to_json(&curve)
}

#[derive(Serialize)]
struct Merged {
    fisher_weighted: Vec<f64>,
    average: Vec<f64>,
}

/// Fisher-weighted and plain averages of two parameter vectors.
pub fn merge_two(theta1: &[f64], f1: &[f64], theta2: &[f64], f2: &[f64]) -> DemoResult<String> {
    let fisher = |v: &[f64]| {
        FisherDiagonal::new(
            ParamVector::ungrouped(v.to_vec()),
            FisherKind::Empirical,
            Scaling::SumOverN,
            1,
            FisherMeta::default(),
        )
    };
    let (t1, t2) = (ParamVector::ungrouped(theta1.to_vec()), ParamVector::ungrouped(theta2.to_vec()));
    let input = MergeInput::new(vec![(t1.clone(), fisher(f1).map_err(err)?), (t2.clone(), fisher(f2).map_err(err)?)])
        .with_epsilon(0.0);
    to_json(&Merged {
        fisher_weighted: fisher_merge(&input).map_err(err)?.into_values(),
        average: linear_merge(&[t1, t2]).map_err(err)?.into_values(),
    })
}

fn js(r: DemoResult<String>) -> Result<String, JsValue> {
    r.map_err(|e| JsValue::from_str(&e))
}

#[wasm_bindgen(js_name = compareEstimators)]
pub fn compare_estimators(beta2: f64, steps: u32, seed: u32) -> Result<String, JsValue> {
    js(compare(beta2, steps as u64, seed as u64))
}

#[wasm_bindgen(js_name = pruneCurve)]
pub fn prune_curve_js(seed: u32) -> Result<String, JsValue> {
    js(prune_curve(seed as u64))
}

#[wasm_bindgen(js_name = mergeTwo)]
pub fn merge_two_js(theta1: &[f64], f1: &[f64], theta2: &[f64], f2: &[f64]) -> Result<String, JsValue> {
    js(merge_two(theta1, f1, theta2, f2))
}

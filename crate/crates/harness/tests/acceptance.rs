//! Acceptance suite. Prints one line per criterion and exits non-zero if any
//! criterion fails.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::time::{Duration, Instant};

use rand::Rng as _;
use squisher_core::data::{Dataset, GeneratorSpec};
use squisher_core::embed::{embed_task, task_distance};
use squisher_core::fisher::{
    minibatch_joint_expectation, oracle_fisher, squisher_from_state, FisherDiagonal, FisherKind, FisherMeta,
    OracleMode, Scaling,
};
use squisher_core::merge::{fisher_merge, ubgm_merge, MergeInput};
use squisher_core::nn::{self, Activation, Head, Label, LabelSource, MlpSpec};
use squisher_core::optim::{Checkpoint, Hyperparams, OptimizerKind};
use squisher_core::params::ParamVector;
use squisher_core::rng::{self, Rng};
use squisher_core::sparsify::{pruning_stats, top_k_mask};
use squisher_core::tensor::Tensor;
use squisher_core::train::{train, train_checkpoint, TrainConfig};
use squisher_core::Error;
use squisher_lab::commands::{self, Command};
use squisher_lab::config::Overrides;
use squisher_lab::report::ReportRow;

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: impl Into<String>) -> Outcome {
    Outcome { pass, detail: detail.into() }
}

fn uniform(rng: &mut Rng, n: usize, scale: f64) -> Vec<f64> {
    (0..n).map(|_| rng.random_range(-scale..scale)).collect()
}

fn random_params(spec: &MlpSpec, rng: &mut Rng, scale: f64) -> ParamVector {
    let zeros = spec.zeros();
    zeros.with_values(uniform(rng, zeros.len(), scale)).unwrap()
}

fn classification_data(rng: &mut Rng, n: usize, dims: usize, classes: usize) -> Dataset {
    let rows: Vec<Vec<f64>> = (0..n).map(|_| uniform(rng, dims, 1.5)).collect();
    let labels = (0..n).map(|_| Label::Class(rng.random_range(0..classes))).collect();
    Dataset::new(Tensor::from_rows(&rows).unwrap(), labels, None).unwrap()
}

fn fisher(values: Vec<f64>) -> FisherDiagonal {
    let n = values.len();
    FisherDiagonal::new(
        ParamVector::ungrouped(values),
        FisherKind::Empirical,
        Scaling::SumOverN,
        n.max(1),
        FisherMeta::default(),
    )
    .unwrap()
}

fn max_rel(a: &[f64], b: &[f64]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(x, y)| {
            let scale = x.abs().max(y.abs());
            if scale == 0.0 {
                0.0
            } else {
                (x - y).abs() / scale
            }
        })
        .fold(0.0, f64::max)
}

fn max_abs(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

fn config(name: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("configs").join(name)
}

fn run_command(cmd: Command, cfg: &str, out: &Path, set: &[String]) -> Vec<ReportRow> {
    let ov = Overrides { set: set.to_vec(), seed: None, out: Some(out.to_path_buf()) };
    commands::run(cmd, &config(cfg), &ov)
        .unwrap_or_else(|e| panic!("{} failed: {e}", cmd.name()))
        .rows
}

/// Mean of `metric` per method.
fn means(rows: &[ReportRow], metric: &str) -> BTreeMap<String, f64> {
    let mut acc: BTreeMap<String, (f64, usize)> = BTreeMap::new();
    for r in rows.iter().filter(|r| r.metric_name == metric) {
        let e = acc.entry(r.method.clone()).or_default();
        e.0 += r.metric_value;
        e.1 += 1;
    }
    acc.into_iter().map(|(k, (s, n))| (k, s / n as f64)).collect()
}

fn within(elapsed: Duration, limit_s: f64) -> bool {
    elapsed.as_secs_f64() < limit_s
}

/// Analytic per-example gradients against central differences.
fn gradient_oracle() -> Outcome {
    let start = Instant::now();
    let mut rng = rng::stream(11, &[]);
    let h = 1e-5;
    let mut failures = 0;
    let mut worst = 0.0f64;
    let mut coords = 0;
    for i in 0..50 {
        let depth = rng.random_range(1..=3);
        let mut sizes = vec![rng.random_range(1..=4)];
        for _ in 1..depth {
            sizes.push(rng.random_range(2..=5));
        }
        let head = if i % 3 == 2 { Head::Mse } else { Head::SoftmaxXent };
        sizes.push(rng.random_range(2..=4));
        let act = if i % 2 == 0 { Activation::Tanh } else { Activation::Relu };
        let spec = MlpSpec::new(sizes.clone(), act, head).unwrap();
        let params = random_params(&spec, &mut rng, 1.0);
        let x = Tensor::vector(uniform(&mut rng, sizes[0], 1.5)).unwrap();
        let out_dim = *sizes.last().unwrap();
        let y = match head {
            Head::SoftmaxXent => Label::Class(rng.random_range(0..out_dim)),
            Head::Mse => Label::Real(uniform(&mut rng, out_dim, 1.0)),
        };
        let (_, g) = nn::loss_and_grad(&spec, &params, &x, &y).unwrap();
        let loss_at = |j: usize, d: f64| {
            let mut v = params.values().to_vec();
            v[j] += d;
            nn::loss_and_grad(&spec, &params.with_values(v).unwrap(), &x, &y).unwrap().0
        };
        for j in 0..params.len() {
            let fd = (loss_at(j, h) - loss_at(j, -h)) / (2.0 * h);
            let a = g.values()[j];
            let diff = (a - fd).abs();
            // Relative tolerance with an absolute floor for near-zero coordinates.
            let tol = (1e-6 * a.abs().max(fd.abs())).max(1e-10);
            if diff > tol {
                failures += 1;
            }
            worst = worst.max(diff / tol);
            coords += 1;
        }
    }
    let t = start.elapsed();
    outcome(
        failures == 0 && within(t, 5.0),
        format!(
            "50 nets, {coords} coordinates, {failures} outside tolerance, worst error/tolerance {worst:.3}, {:.2}s",
            t.as_secs_f64()
        ),
    )
}

/// Exact standard and joint Fisher coincide on tiny classifiers.
fn fisher_identity() -> Outcome {
    let start = Instant::now();
    let mut rng = rng::stream(12, &[]);
    let shapes: [&[usize]; 4] = [&[1, 2], &[2, 2], &[1, 3], &[1, 1, 2]];
    let mut worst = 0.0f64;
    let mut count = 0;
    for i in 0..12 {
        let sizes = shapes[i % shapes.len()].to_vec();
        let act = if i % 2 == 0 { Activation::Tanh } else { Activation::Relu };
        let spec = MlpSpec::new(sizes.clone(), act, Head::SoftmaxXent).unwrap();
        assert!(spec.num_params() <= 8);
        let params = random_params(&spec, &mut rng, 1.5);
        let n = 1 + i % 4;
        let data = classification_data(&mut rng, n, sizes[0], *sizes.last().unwrap());
        let s = oracle_fisher(&spec, &params, &data, OracleMode::Standard).unwrap();
        let j = oracle_fisher(&spec, &params, &data, OracleMode::Joint).unwrap();
        worst = worst.max(max_abs(s.values(), j.values()));
        count += 1;
    }
    let t = start.elapsed();
    outcome(
        worst <= 1e-10 && within(t, 10.0),
        format!("{count} classifiers, max |standard - joint| {worst:.2e}, {:.2}s", t.as_secs_f64()),
    )
}

/// The sampled-label mini-batch joint estimator is unbiased; the observed-label
/// one is not.
fn minibatch_unbiased() -> Outcome {
    let start = Instant::now();
    let mut rng = rng::stream(13, &[]);
    let mut worst = 0.0f64;
    for (sizes, n, b) in [([2usize, 2], 4usize, 2usize), ([1, 3], 4, 3), ([2, 3], 3, 1), ([1, 2], 4, 4)] {
        let spec = MlpSpec::new(sizes.to_vec(), Activation::Tanh, Head::SoftmaxXent).unwrap();
        let params = random_params(&spec, &mut rng, 1.0);
        let data = classification_data(&mut rng, n, sizes[0], sizes[1]);
        let oracle = oracle_fisher(&spec, &params, &data, OracleMode::Joint).unwrap();
        let sampled = minibatch_joint_expectation(&spec, &params, &data, b, LabelSource::Sampled).unwrap();
        worst = worst.max(max_abs(sampled.values(), oracle.values()));
    }
    // Crafted instance: every example carries the same observed label, so the
    // observed gradients all point the same way and their cross terms survive.
    let spec = MlpSpec::new(vec![1, 2], Activation::Tanh, Head::SoftmaxXent).unwrap();
    let params = spec.zeros().with_values(vec![0.3, -0.2, 0.1, 0.4]).unwrap();
    let rows: Vec<Vec<f64>> = [0.5, 1.0, -0.25, 0.75].iter().map(|&v| vec![v]).collect();
    let data = Dataset::new(Tensor::from_rows(&rows).unwrap(), vec![Label::Class(0); 4], None).unwrap();
    let oracle = oracle_fisher(&spec, &params, &data, OracleMode::Joint).unwrap();
    let empirical = minibatch_joint_expectation(&spec, &params, &data, 2, LabelSource::Empirical).unwrap();
    let gap = max_abs(empirical.values(), oracle.values());
    let t = start.elapsed();
    outcome(
        worst <= 1e-10 && gap > 1e-6 && within(t, 10.0),
        format!(
            "sampled-label max deviation {worst:.2e}, observed-label gap {gap:.3e}, {:.2}s",
            t.as_secs_f64()
        ),
    )
}

/// With parameters frozen and full batches, the bias-corrected accumulator is
/// exactly the squared full-batch gradient.
fn squisher_joint_consistency() -> Outcome {
    let gen = GeneratorSpec::blobs(5, 3, 8, 1.0, 14);
    let stream = squisher_core::data::generate(&gen).unwrap();
    let data = &stream.tasks[0].train;
    let n = data.len();
    let spec = MlpSpec::new(vec![5, 6, 3], Activation::Tanh, Head::SoftmaxXent).unwrap();
    let params = nn::init_params(&spec, &mut rng::stream(14, &[rng::purpose::INIT]));
    let cfg = TrainConfig {
        optimizer: OptimizerKind::Adam,
        hyper: Hyperparams { lr: 0.0, ..Hyperparams::default() },
        batch_size: n,
        steps: 100,
    };
    let out = train(&spec, params.clone(), data, &cfg, 0, 0, None).unwrap();
    let sq = squisher_from_state(&out.state, n, n, true).unwrap();
    let all: Vec<usize> = (0..n).collect();
    let (_, grad) = nn::batch_loss_and_grad(&spec, &params, data, &all).unwrap();
    let want: Vec<f64> = grad.values().iter().map(|g| n as f64 * g * g).collect();
    let rel = max_rel(sq.values(), &want);
    let frozen = out.params == params;
    outcome(
        frozen && out.state.t == 100 && rel <= 1e-12,
        format!("N={n}, t={}, params frozen: {frozen}, max rel err {rel:.2e}", out.state.t),
    )
}

/// Merges, top-k selections and task distances ignore a global Fisher scale.
fn scale_invariance() -> Outcome {
    let mut rng = rng::stream(15, &[]);
    let p = 40;
    let mut worst = 0.0f64;
    let mut masks_equal = true;
    let mut dist_dev = 0.0f64;
    for _ in 0..10 {
        let models: Vec<(ParamVector, FisherDiagonal)> = (0..3)
            .map(|_| {
                let f: Vec<f64> = (0..p).map(|_| rng.random_range(0.01..2.0)).collect();
                (ParamVector::ungrouped(uniform(&mut rng, p, 1.0)), fisher(f))
            })
            .collect();
        let base = ParamVector::ungrouped(uniform(&mut rng, p, 1.0));
        let base_f = fisher((0..p).map(|_| rng.random_range(0.0..1.0)).collect());
        let input = MergeInput::new(models.clone()).with_epsilon(0.0);
        let merged = fisher_merge(&input).unwrap();
        let ubgm = ubgm_merge(&input.clone().with_base(base.clone(), base_f.clone())).unwrap();
        let stats = pruning_stats(&models[0].0, &models[0].1).unwrap();
        for c in [1e-3, 1e3] {
            let scaled: Vec<_> = models.iter().map(|(t, f)| (t.clone(), f.scaled(c).unwrap())).collect();
            let input_c = MergeInput::new(scaled.clone()).with_epsilon(0.0);
            worst = worst.max(max_rel(fisher_merge(&input_c).unwrap().values(), merged.values()));
            let ubgm_c = ubgm_merge(&input_c.with_base(base.clone(), base_f.scaled(c).unwrap())).unwrap();
            worst = worst.max(max_rel(ubgm_c.values(), ubgm.values()));
            let stats_c = pruning_stats(&scaled[0].0, &scaled[0].1).unwrap();
            for k in [1, 10, 25] {
                masks_equal &= top_k_mask(stats_c.rho.values(), k).unwrap()
                    == top_k_mask(stats.rho.values(), k).unwrap();
                masks_equal &= top_k_mask(scaled[0].1.values(), k).unwrap()
                    == top_k_mask(models[0].1.values(), k).unwrap();
            }
            let d = task_distance(&embed_task(&models[0].1).unwrap(), &embed_task(&models[1].1).unwrap()).unwrap();
            let dc = task_distance(&embed_task(&scaled[0].1).unwrap(), &embed_task(&scaled[1].1).unwrap()).unwrap();
            dist_dev = dist_dev.max((d - dc).abs() / d.abs().max(f64::MIN_POSITIVE));
        }
    }
    outcome(
        worst <= 1e-12 && masks_equal && dist_dev <= 1e-12,
        format!("merge max rel dev {worst:.2e}, top-k masks equal: {masks_equal}, distance rel dev {dist_dev:.2e}"),
    )
}

fn merge_arithmetic() -> Outcome {
    let input = MergeInput::new(vec![
        (ParamVector::ungrouped(vec![1.0, 0.0]), fisher(vec![2.0, 1.0])),
        (ParamVector::ungrouped(vec![0.0, 1.0]), fisher(vec![1.0, 2.0])),
    ])
    .with_epsilon(0.0);
    let merged = fisher_merge(&input).unwrap();
    let example = merged.values() == [2.0 / 3.0, 2.0 / 3.0];
    let theta = [2.0, -3.5, 0.125];
    let single = MergeInput::new(vec![(ParamVector::ungrouped(theta.to_vec()), fisher(vec![0.7, 1.3, 4.0]))])
        .with_base(ParamVector::ungrouped(vec![0.5, -1.0, 9.0]), fisher(vec![0.0; 3]))
        .with_epsilon(0.0);
    let recovered = ubgm_merge(&single).unwrap();
    let recovery = recovered.values() == theta;
    outcome(
        example && recovery,
        format!("weighted example {:?}, single-model recovery exact: {recovery}", merged.values()),
    )
}

fn ewc_direction(out: &Path) -> Outcome {
    let start = Instant::now();
    let rows = run_command(Command::Ewc, "ewc.toml", out, &[]);
    let t = start.elapsed();
    let m = means(&rows, "mean_final_accuracy");
    let (base, fish, sq) = (m["baseline"], m["fisher"], m["squisher"]);
    let seeds = rows.iter().filter(|r| r.method == "baseline").count();
    outcome(
        seeds == 5
            && fish - base >= 0.05
            && sq - base >= 0.05
            && (fish - sq).abs() <= 0.03
            && within(t, 180.0),
        format!(
            "{seeds} seeds: baseline {:.2}, fisher {:.2}, squisher {:.2} (points), {:.1}s",
            100.0 * base,
            100.0 * fish,
            100.0 * sq,
            t.as_secs_f64()
        ),
    )
}

fn pruning_direction(out: &Path) -> Outcome {
    let start = Instant::now();
    let rows = run_command(Command::Prune, "prune.toml", out, &[]);
    let t = start.elapsed();
    let m = means(&rows, "accuracy");
    let (rand, fish, sq) = (m["baseline"], m["fisher"], m["squisher"]);
    outcome(
        fish - rand >= 0.05 && sq - rand >= 0.05 && (fish - sq).abs() <= 0.03 && within(t, 120.0),
        format!(
            "75% pruned: random {:.2}, fisher {:.2}, squisher {:.2}, dense {:.2} (points), {:.1}s",
            100.0 * rand,
            100.0 * fish,
            100.0 * sq,
            100.0 * m["dense"],
            t.as_secs_f64()
        ),
    )
}

fn reset_retention(out: &Path) -> Outcome {
    let start = Instant::now();
    let rows = run_command(Command::Mask, "mask.toml", out, &[]);
    let t = start.elapsed();
    let m = means(&rows, "gap_retained");
    let (rand, fish, sq) = (m["baseline"], m["fisher"], m["squisher"]);
    outcome(
        fish >= 0.9 && sq >= 0.9 && rand < fish.min(sq) && within(t, 120.0),
        format!(
            "gap retained with 50% masks: fisher {fish:.3}, squisher {sq:.3}, random {rand:.3}, {:.1}s",
            t.as_secs_f64()
        ),
    )
}

fn embedding_ranking(out: &Path) -> Outcome {
    let rows = run_command(Command::Embed, "embed.toml", out, &[]);
    let m = means(&rows, "mrr");
    let (fish, sq, size) = (m["fisher"], m["squisher"], m["baseline"]);
    outcome(
        fish >= 0.8 && sq >= 0.8 && size < fish.min(sq),
        format!("MRR: fisher {fish:.3}, squisher {sq:.3}, dataset size {size:.3}"),
    )
}

fn ablation_directions(out: &Path) -> Outcome {
    let rows = run_command(Command::Ablate, "ablate.toml", out, &[]);
    let m = means(&rows, "mean_final_accuracy");
    let (base, fish, sq) = (m["baseline"], m["fisher"], m["squisher"]);
    let (no_norm, joint) = (m["squisher_no_norm"], m["joint"]);
    let (low, high) = (m["squisher_beta2=0.95"], m["squisher_beta2=0.999"]);
    outcome(
        no_norm < sq && (joint - fish).abs() <= 0.03 && low <= high && low > base,
        format!(
            "no_norm {:.2} < squisher {:.2}; joint {:.2} vs fisher {:.2}; beta2 0.95 {:.2} <= 0.999 {:.2}, baseline {:.2}",
            100.0 * no_norm,
            100.0 * sq,
            100.0 * joint,
            100.0 * fish,
            100.0 * low,
            100.0 * high,
            100.0 * base
        ),
    )
}

fn runtime_gap(out: &Path) -> Outcome {
    run_command(Command::Train, "train_large.toml", out, &[]);
    let ckpt = out.join("checkpoint-seed0.ckpt");
    let data = out.join("train.data");
    let paths = [
        format!("checkpoint={:?}", ckpt.display().to_string()),
        format!("dataset={:?}", data.display().to_string()),
    ];
    let mut secs = BTreeMap::new();
    for est in ["empirical", "squisher"] {
        let mut set = paths.to_vec();
        set.push(format!("estimator=\"{est}\""));
        let rows = run_command(Command::Fisher, "fisher.toml", out, &set);
        let r = rows.iter().find(|r| r.metric_name == "extraction_seconds").unwrap();
        secs.insert(est, r.metric_value);
    }
    let n = Dataset::load(&data).unwrap().len();
    let p = Checkpoint::from_bytes(&std::fs::read(&ckpt).unwrap()).unwrap().params.len();
    let ratio = secs["squisher"] / secs["empirical"];
    outcome(
        n == 10_000 && ratio < 0.01,
        format!(
            "N={n}, {p} params: squisher {:.2e}s vs empirical {:.3}s, ratio {:.3}%",
            secs["squisher"],
            secs["empirical"],
            100.0 * ratio
        ),
    )
}

fn named_format_error<T: std::fmt::Debug>(r: Result<T, Error>, want: &str) -> bool {
    matches!(r, Err(Error::Format { ref field, .. }) if field == want)
}

fn persistence() -> Outcome {
    let gen = GeneratorSpec::blobs(4, 3, 30, 1.0, 16);
    let data = squisher_core::data::generate(&gen).unwrap().tasks.remove(0).train;
    let spec = MlpSpec::new(vec![4, 8, 3], Activation::Relu, Head::SoftmaxXent).unwrap();
    let cfg = TrainConfig {
        optimizer: OptimizerKind::Adam,
        hyper: Hyperparams { lr: 0.01, ..Hyperparams::default() },
        batch_size: 10,
        steps: 50,
    };
    let ckpt = train_checkpoint(&spec, &data, &cfg, 3, "persistence").unwrap();
    let bytes = ckpt.to_bytes().unwrap();
    let back = Checkpoint::from_bytes(&bytes).unwrap();
    let bits = |v: &[f64]| v.iter().map(|x| x.to_bits()).collect::<Vec<_>>();
    let ckpt_ok = back == ckpt && back.to_bytes().unwrap() == bytes && bits(back.params.values()) == bits(ckpt.params.values());

    let f = squisher_core::fisher::squisher(&ckpt, true).unwrap();
    let fbytes = f.to_bytes().unwrap();
    let fback = FisherDiagonal::from_bytes(&fbytes).unwrap();
    let fisher_ok = fback == f && fback.to_bytes().unwrap() == fbytes && bits(fback.values()) == bits(f.values());

    let mut magic = bytes.clone();
    magic[0] ^= 0xff;
    let mut version = fbytes.clone();
    version[8] = version[8].wrapping_add(7);
    let mut header = bytes.clone();
    header[12..20].copy_from_slice(&(u64::MAX / 2).to_le_bytes());
    let truncated = &fbytes[..fbytes.len() - 3];
    let mut trailing = bytes.clone();
    trailing.extend_from_slice(&[0; 8]);
    let errors = [
        named_format_error(Checkpoint::from_bytes(&magic), "magic"),
        named_format_error(FisherDiagonal::from_bytes(&version), "format_version"),
        named_format_error(Checkpoint::from_bytes(&header), "header"),
        named_format_error(FisherDiagonal::from_bytes(truncated), "values"),
        named_format_error(Checkpoint::from_bytes(&trailing), "payload"),
        named_format_error(Checkpoint::from_bytes(&bytes[..10]), "preamble"),
    ];
    let named = errors.iter().filter(|&&e| e).count();
    outcome(
        ckpt_ok && fisher_ok && named == errors.len(),
        format!(
            "checkpoint round trip: {ckpt_ok}, fisher round trip: {fisher_ok}, named corruption errors {named}/{}",
            errors.len()
        ),
    )
}

fn main() {
    let dir = tempfile::tempdir().unwrap();
    let sub = |name: &str| dir.path().join(name);
    let criteria: Vec<(&str, Box<dyn Fn() -> Outcome>)> = vec![
        ("gradient oracle", Box::new(gradient_oracle)),
        ("fisher identity", Box::new(fisher_identity)),
        ("mini-batch unbiasedness", Box::new(minibatch_unbiased)),
        ("squisher-joint consistency", Box::new(squisher_joint_consistency)),
        ("scale invariances", Box::new(scale_invariance)),
        ("merge arithmetic", Box::new(merge_arithmetic)),
        ("ewc direction of effect", Box::new(|| ewc_direction(&sub("ewc")))),
        ("pruning direction of effect", Box::new(|| pruning_direction(&sub("prune")))),
        ("reset retention", Box::new(|| reset_retention(&sub("mask")))),
        ("embedding ranking", Box::new(|| embedding_ranking(&sub("embed")))),
        ("ablation directions", Box::new(|| ablation_directions(&sub("ablate")))),
        ("runtime gap", Box::new(|| runtime_gap(&sub("runtime")))),
        ("persistence", Box::new(persistence)),
    ];
    let mut failed = 0;
    for (i, (name, check)) in criteria.iter().enumerate() {
        let o = match std::panic::catch_unwind(std::panic::AssertUnwindSafe(check)) {
            Ok(o) => o,
            Err(_) => outcome(false, "panicked"),
        };
        if !o.pass {
            failed += 1;
        }
        println!("criterion {:>2} {:<28} {}  {}", i + 1, name, if o.pass { "PASS" } else { "FAIL" }, o.detail);
    }
    println!("{}/{} criteria passed", criteria.len() - failed, criteria.len());
    if failed > 0 {
        std::process::exit(1);
    }
}

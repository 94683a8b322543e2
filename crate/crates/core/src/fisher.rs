//! Fisher-diagonal estimators, the Squisher, and exact enumeration oracles for
//! tiny classifiers.
//!
//! Every estimator works in the sum-reduced convention internally
//! ([`Scaling::SumOverN`]) and converts on request. The Squisher is `N * v`
//! where `v` is the optimizer's accumulator built from mean-reduced batch
//! gradients.

use std::path::Path;

use rand::seq::index;
use serde::{Deserialize, Serialize};

use crate::container::{self, FISHER_MAGIC};
use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::nn::{self, Head, Label, MlpSpec};
use crate::optim::{Checkpoint, OptimizerState};
use crate::params::{ParamGroup, ParamVector};
use crate::rng::Rng;

pub const FISHER_FORMAT_VERSION: u32 = 1;

/// Exact enumeration is refused beyond this many outcomes.
pub const ORACLE_CAPACITY: u128 = 1_000_000;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FisherKind {
    /// `sum_n g_n^2` with observed labels.
    Empirical,
    /// Monte-Carlo standard Fisher with model-sampled labels.
    StandardMc,
    /// `(sum_n g_n)^2` with observed labels.
    JointEmpirical,
    /// `N * v` recycled from an adaptive optimizer.
    Squisher,
    /// Exact standard Fisher by enumeration.
    OracleStandard,
    /// Exact joint Fisher by enumeration.
    OracleJoint,
    /// `(N/B) (sum_{n in batch} g_hat_n)^2` averaged over random batches.
    MinibatchJoint,
    /// `N * mean_b (mean_{n in b} g_n)^2` over one pass of fixed batches:
    /// the accumulator's quantity without the moving average.
    JointBatched,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Scaling {
    SumOverN,
    MeanOverN,
}

impl Scaling {
    pub fn name(self) -> &'static str {
        match self {
            Scaling::SumOverN => "sum_over_n",
            Scaling::MeanOverN => "mean_over_n",
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FisherMeta {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub mc_samples: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub beta2: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub bias_corrected: Option<bool>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub steps: Option<u64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub batch_size: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub trials: Option<usize>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct FisherDiagonal {
    pub values: ParamVector,
    pub kind: FisherKind,
    pub scaling: Scaling,
    pub n_data: usize,
    pub meta: FisherMeta,
}

impl FisherDiagonal {
    pub fn new(
        values: ParamVector,
        kind: FisherKind,
        scaling: Scaling,
        n_data: usize,
        meta: FisherMeta,
    ) -> Result<Self> {
        if n_data == 0 {
            return Err(Error::Input("a Fisher diagonal needs N >= 1".into()));
        }
        if let Some(i) = values.values().iter().position(|v| !(v.is_finite() && *v >= 0.0)) {
            return Err(Error::Numeric(format!(
                "Fisher value {} at coordinate {i} is negative or non-finite",
                values.values()[i]
            )));
        }
        Ok(Self {
            values,
            kind,
            scaling,
            n_data,
            meta,
        })
    }

    pub fn values(&self) -> &[f64] {
        self.values.values()
    }

    /// Multiplies every value by `c > 0`, keeping all tags.
    pub fn scaled(&self, c: f64) -> Result<Self> {
        if !(c > 0.0 && c.is_finite()) {
            return Err(Error::Input(format!("scale factor must be positive, got {c}")));
        }
        let values = self.values.with_values(self.values().iter().map(|v| v * c).collect())?;
        Ok(Self { values, ..self.clone() })
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let header = FisherHeader {
            kind: self.kind,
            scaling: self.scaling,
            n_data: self.n_data,
            meta: self.meta.clone(),
            groups: self.values.groups().to_vec(),
        };
        container::encode(FISHER_MAGIC, FISHER_FORMAT_VERSION, &header, &[("values", self.values())])
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let (h, mut arrays): (FisherHeader, _) =
            container::decode(bytes, FISHER_MAGIC, FISHER_FORMAT_VERSION, &["values"])?;
        let values = ParamVector::new(arrays.pop().expect("one array"), h.groups)
            .map_err(|e| Error::format("groups", e.to_string()))?;
        FisherDiagonal::new(values, h.kind, h.scaling, h.n_data, h.meta)
            .map_err(|e| Error::format("values", e.to_string()))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes()?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&std::fs::read(path)?)
    }
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct FisherHeader {
    kind: FisherKind,
    scaling: Scaling,
    n_data: usize,
    meta: FisherMeta,
    groups: Vec<ParamGroup>,
}

/// Converts between the sum and mean conventions by an exact factor of `N`.
pub fn rescale(f: &FisherDiagonal, target: Scaling) -> FisherDiagonal {
    let n = f.n_data as f64;
    let values: Vec<f64> = match (f.scaling, target) {
        (a, b) if a == b => return f.clone(),
        (Scaling::SumOverN, Scaling::MeanOverN) => f.values().iter().map(|v| v / n).collect(),
        _ => f.values().iter().map(|v| v * n).collect(),
    };
    FisherDiagonal {
        values: f.values.with_values(values).expect("same length"),
        scaling: target,
        ..f.clone()
    }
}

/// Source of per-example gradients for the observed labels.
pub trait GradientProvider {
    fn num_examples(&self) -> usize;
    fn gradient(&self, index: usize) -> Result<ParamVector>;
}

impl GradientProvider for [ParamVector] {
    fn num_examples(&self) -> usize {
        self.len()
    }

    fn gradient(&self, index: usize) -> Result<ParamVector> {
        let g = &self[index];
        if index > 0 {
            self[0].ensure_compatible(g, "gradient provider")?;
        }
        Ok(g.clone())
    }
}

/// Per-example gradients of a model on a dataset.
pub struct ModelGradients<'a> {
    pub spec: &'a MlpSpec,
    pub params: &'a ParamVector,
    pub data: &'a Dataset,
}

impl GradientProvider for ModelGradients<'_> {
    fn num_examples(&self) -> usize {
        self.data.len()
    }

    fn gradient(&self, index: usize) -> Result<ParamVector> {
        Ok(nn::loss_and_grad_masked(
            self.spec,
            self.params,
            self.data.inputs().row(index),
            &self.data.labels()[index],
            self.data.active_classes(),
        )?
        .1)
    }
}

fn finish(
    sum: ParamVector,
    kind: FisherKind,
    n: usize,
    scaling: Scaling,
    meta: FisherMeta,
) -> Result<FisherDiagonal> {
    let f = FisherDiagonal::new(sum, kind, Scaling::SumOverN, n, meta)?;
    Ok(rescale(&f, scaling))
}

/// `sum_n g_n^2` (or its mean) from any gradient provider.
pub fn empirical_fisher_from<P: GradientProvider + ?Sized>(
    provider: &P,
    scaling: Scaling,
) -> Result<FisherDiagonal> {
    let n = provider.num_examples();
    if n == 0 {
        return Err(Error::Input("empirical Fisher of an empty dataset".into()));
    }
    let mut acc: Option<ParamVector> = None;
    for i in 0..n {
        let g = provider.gradient(i)?;
        let a = acc.get_or_insert_with(|| ParamVector::zeros_like(&g));
        a.ensure_compatible(&g, "empirical Fisher")?;
        for (s, x) in a.values_mut().iter_mut().zip(g.values()) {
            *s += x * x;
        }
    }
    finish(acc.expect("n > 0"), FisherKind::Empirical, n, scaling, FisherMeta::default())
}

pub fn empirical_fisher(
    spec: &MlpSpec,
    params: &ParamVector,
    data: &Dataset,
    scaling: Scaling,
) -> Result<FisherDiagonal> {
    empirical_fisher_from(&ModelGradients { spec, params, data }, scaling)
}

/// `(sum_n g_n)^2` (sum form) or `(1/N) (sum_n g_n)^2 = N (grad L)^2` (mean form).
pub fn joint_empirical_fisher_from<P: GradientProvider + ?Sized>(
    provider: &P,
    scaling: Scaling,
) -> Result<FisherDiagonal> {
    let n = provider.num_examples();
    if n == 0 {
        return Err(Error::Input("joint empirical Fisher of an empty dataset".into()));
    }
    let mut acc: Option<ParamVector> = None;
    for i in 0..n {
        let g = provider.gradient(i)?;
        let a = acc.get_or_insert_with(|| ParamVector::zeros_like(&g));
        a.ensure_compatible(&g, "joint empirical Fisher")?;
        for (s, x) in a.values_mut().iter_mut().zip(g.values()) {
            *s += x;
        }
    }
    let mut sum = acc.expect("n > 0");
    for s in sum.values_mut() {
        *s *= *s;
    }
    finish(sum, FisherKind::JointEmpirical, n, scaling, FisherMeta::default())
}

pub fn joint_empirical_fisher(
    spec: &MlpSpec,
    params: &ParamVector,
    data: &Dataset,
    scaling: Scaling,
) -> Result<FisherDiagonal> {
    joint_empirical_fisher_from(&ModelGradients { spec, params, data }, scaling)
}

/// Monte-Carlo standard Fisher: `sum_n (1/S) sum_s g_hat_{n,s}^2` with labels
/// drawn from the model.
pub fn standard_fisher_mc(
    spec: &MlpSpec,
    params: &ParamVector,
    data: &Dataset,
    samples: usize,
    rng: &mut Rng,
    scaling: Scaling,
) -> Result<FisherDiagonal> {
    if samples == 0 {
        return Err(Error::Input("Monte-Carlo Fisher needs S >= 1".into()));
    }
    if data.is_empty() {
        return Err(Error::Input("Monte-Carlo Fisher of an empty dataset".into()));
    }
    spec.check_params(params)?;
    let mut sum = ParamVector::zeros_like(params);
    let mut g = vec![0.0; params.len()];
    let inv_s = 1.0 / samples as f64;
    for i in 0..data.len() {
        let x = data.inputs().row(i);
        for _ in 0..samples {
            let y = nn::sample_label_masked(spec, params, x, data.active_classes(), rng)?;
            g.iter_mut().for_each(|v| *v = 0.0);
            nn::accumulate_example(spec, params.values(), x, &y, data.active_classes(), 1.0, &mut g);
            for (s, v) in sum.values_mut().iter_mut().zip(&g) {
                *s += inv_s * v * v;
            }
        }
    }
    let meta = FisherMeta {
        mc_samples: Some(samples),
        ..FisherMeta::default()
    };
    finish(sum, FisherKind::StandardMc, data.len(), scaling, meta)
}

/// `N * accumulator` of an Adam/AdamW state trained on `N` examples with
/// batches of `B`.
pub fn squisher_from_state(
    state: &OptimizerState,
    n_data: usize,
    batch_size: usize,
    bias_corrected: bool,
) -> Result<FisherDiagonal> {
    let acc = state.accumulator(bias_corrected)?;
    let n = n_data as f64;
    let values = acc.with_values(acc.values().iter().map(|v| n * v).collect())?;
    let meta = FisherMeta {
        beta2: Some(state.hyper.beta2),
        bias_corrected: Some(bias_corrected),
        steps: Some(state.t),
        batch_size: Some(batch_size),
        ..FisherMeta::default()
    };
    FisherDiagonal::new(values, FisherKind::Squisher, Scaling::SumOverN, n_data, meta)
}

/// Squisher of a checkpoint. Reads only the optimizer state and provenance.
pub fn squisher(ckpt: &Checkpoint, bias_corrected: bool) -> Result<FisherDiagonal> {
    squisher_from_state(
        &ckpt.optimizer_state,
        ckpt.provenance.dataset_size,
        ckpt.provenance.batch_size,
        bias_corrected,
    )
}

/// Accumulator quantity without the moving average: `N * mean_b gbar_b^2` over
/// consecutive full batches of size `B` (a trailing partial batch is dropped).
pub fn joint_batched_fisher(
    spec: &MlpSpec,
    params: &ParamVector,
    data: &Dataset,
    batch_size: usize,
) -> Result<FisherDiagonal> {
    if batch_size == 0 || batch_size > data.len() {
        return Err(Error::Input(format!(
            "batch size {batch_size} must lie in [1, {}]",
            data.len()
        )));
    }
    let batches = data.len() / batch_size;
    let mut acc = ParamVector::zeros_like(params);
    let idx: Vec<usize> = (0..data.len()).collect();
    for chunk in idx.chunks_exact(batch_size) {
        let (_, g) = nn::batch_loss_and_grad(spec, params, data, chunk)?;
        for (a, v) in acc.values_mut().iter_mut().zip(g.values()) {
            *a += v * v;
        }
    }
    let scale = data.len() as f64 / batches as f64;
    let values = acc.with_values(acc.values().iter().map(|v| v * scale).collect())?;
    let meta = FisherMeta {
        batch_size: Some(batch_size),
        ..FisherMeta::default()
    };
    FisherDiagonal::new(values, FisherKind::JointBatched, Scaling::SumOverN, data.len(), meta)
}

/// Probabilities and would-be gradients for every (example, class) pair.
struct LabelTable {
    classes: Vec<usize>,
    probs: Vec<Vec<f64>>,
    grads: Vec<Vec<Vec<f64>>>,
}

fn label_table(spec: &MlpSpec, params: &ParamVector, data: &Dataset) -> Result<LabelTable> {
    if spec.head != Head::SoftmaxXent {
        return Err(Error::Input("enumeration oracles need a softmax head".into()));
    }
    spec.check_params(params)?;
    let classes: Vec<usize> = match data.active_classes() {
        Some(a) => a.to_vec(),
        None => (0..spec.output_dim()).collect(),
    };
    let mut probs = Vec::with_capacity(data.len());
    let mut grads = Vec::with_capacity(data.len());
    for i in 0..data.len() {
        let x = data.inputs().row(i);
        let p = nn::class_probabilities(spec, params, x, data.active_classes())?;
        probs.push(classes.iter().map(|&c| p[c]).collect());
        grads.push(
            classes
                .iter()
                .map(|&c| {
                    nn::loss_and_grad_masked(spec, params, x, &Label::Class(c), data.active_classes())
                        .map(|(_, g)| g.into_values())
                })
                .collect::<Result<Vec<_>>>()?,
        );
    }
    Ok(LabelTable { classes, probs, grads })
}

fn check_capacity(outcomes: Option<u128>, what: &str) -> Result<u128> {
    match outcomes {
        Some(k) if k <= ORACLE_CAPACITY => Ok(k),
        _ => Err(Error::Capacity(format!(
            "{what} would enumerate more than {ORACLE_CAPACITY} outcomes"
        ))),
    }
}

/// Iterates all label vectors in `[0, c)^n` (odometer order).
fn for_each_assignment(n: usize, c: usize, mut f: impl FnMut(&[usize])) {
    let mut a = vec![0usize; n];
    loop {
        f(&a);
        let mut pos = 0;
        loop {
            if pos == n {
                return;
            }
            a[pos] += 1;
            if a[pos] < c {
                break;
            }
            a[pos] = 0;
            pos += 1;
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OracleMode {
    Standard,
    Joint,
}

/// Exact Fisher diagonal of a tiny classifier.
///
/// `Standard` sums each example's expectation `E[g_hat_n^2]`; `Joint`
/// enumerates every label vector under the joint likelihood and averages
/// `(sum_n g_hat_n)^2`.
pub fn oracle_fisher(
    spec: &MlpSpec,
    params: &ParamVector,
    data: &Dataset,
    mode: OracleMode,
) -> Result<FisherDiagonal> {
    if data.is_empty() {
        return Err(Error::Input("oracle Fisher of an empty dataset".into()));
    }
    let c = match data.active_classes() {
        Some(a) => a.len(),
        None => spec.output_dim(),
    };
    check_capacity((c as u128).checked_pow(data.len() as u32), "oracle Fisher")?;
    let table = label_table(spec, params, data)?;
    let p = params.len();
    let mut out = vec![0.0; p];
    match mode {
        OracleMode::Standard => {
            for n in 0..data.len() {
                for k in 0..c {
                    let w = table.probs[n][k];
                    for (o, g) in out.iter_mut().zip(&table.grads[n][k]) {
                        *o += w * g * g;
                    }
                }
            }
        }
        OracleMode::Joint => {
            let mut s = vec![0.0; p];
            for_each_assignment(data.len(), c, |labels| {
                let w: f64 = labels.iter().enumerate().map(|(n, &k)| table.probs[n][k]).product();
                s.iter_mut().for_each(|v| *v = 0.0);
                for (n, &k) in labels.iter().enumerate() {
                    for (acc, g) in s.iter_mut().zip(&table.grads[n][k]) {
                        *acc += g;
                    }
                }
                for (o, v) in out.iter_mut().zip(&s) {
                    *o += w * v * v;
                }
            });
        }
    }
    let kind = match mode {
        OracleMode::Standard => FisherKind::OracleStandard,
        OracleMode::Joint => FisherKind::OracleJoint,
    };
    FisherDiagonal::new(params.with_values(out)?, kind, Scaling::SumOverN, data.len(), FisherMeta::default())
}

/// Monte-Carlo mini-batch joint estimate: average over `trials` uniformly drawn
/// batches of `(N/B) (sum_{n in batch} g_hat_n)^2` with model-sampled labels.
pub fn minibatch_joint_estimate(
    spec: &MlpSpec,
    params: &ParamVector,
    data: &Dataset,
    batch_size: usize,
    trials: usize,
    rng: &mut Rng,
) -> Result<FisherDiagonal> {
    let n = data.len();
    if batch_size == 0 || batch_size > n {
        return Err(Error::Input(format!("batch size {batch_size} must lie in [1, {n}]")));
    }
    if trials == 0 {
        return Err(Error::Input("need at least one trial".into()));
    }
    spec.check_params(params)?;
    let factor = n as f64 / batch_size as f64 / trials as f64;
    let mut out = ParamVector::zeros_like(params);
    let mut s = vec![0.0; params.len()];
    for _ in 0..trials {
        s.iter_mut().for_each(|v| *v = 0.0);
        for i in index::sample(rng, n, batch_size).into_iter() {
            let x = data.inputs().row(i);
            let y = nn::sample_label_masked(spec, params, x, data.active_classes(), rng)?;
            nn::accumulate_example(spec, params.values(), x, &y, data.active_classes(), 1.0, &mut s);
        }
        for (o, v) in out.values_mut().iter_mut().zip(&s) {
            *o += factor * v * v;
        }
    }
    let meta = FisherMeta {
        batch_size: Some(batch_size),
        trials: Some(trials),
        ..FisherMeta::default()
    };
    FisherDiagonal::new(out, FisherKind::MinibatchJoint, Scaling::SumOverN, n, meta)
}

fn subsets(n: usize, k: usize) -> Vec<Vec<usize>> {
    fn rec(start: usize, n: usize, k: usize, cur: &mut Vec<usize>, out: &mut Vec<Vec<usize>>) {
        if cur.len() == k {
            out.push(cur.clone());
            return;
        }
        for i in start..n {
            if n - i < k - cur.len() {
                break;
            }
            cur.push(i);
            rec(i + 1, n, k, cur, out);
            cur.pop();
        }
    }
    let mut out = Vec::new();
    rec(0, n, k, &mut Vec::with_capacity(k), &mut out);
    out
}

/// Exact expectation of the mini-batch joint estimator over every batch and
/// (for [`nn::LabelSource::Sampled`]) every label assignment. With observed
/// labels the estimator is biased; this makes the gap computable.
pub fn minibatch_joint_expectation(
    spec: &MlpSpec,
    params: &ParamVector,
    data: &Dataset,
    batch_size: usize,
    labels: nn::LabelSource,
) -> Result<FisherDiagonal> {
    let n = data.len();
    if batch_size == 0 || batch_size > n {
        return Err(Error::Input(format!("batch size {batch_size} must lie in [1, {n}]")));
    }
    let table = label_table(spec, params, data)?;
    let c = table.classes.len();
    let batches = subsets(n, batch_size);
    let per_batch = match labels {
        nn::LabelSource::Sampled => (c as u128).checked_pow(batch_size as u32),
        nn::LabelSource::Empirical => Some(1),
    };
    check_capacity(
        per_batch.and_then(|k| k.checked_mul(batches.len() as u128)),
        "mini-batch enumeration",
    )?;
    let p = params.len();
    let factor = n as f64 / batch_size as f64 / batches.len() as f64;
    let mut out = vec![0.0; p];
    let mut s = vec![0.0; p];
    for batch in &batches {
        match labels {
            nn::LabelSource::Sampled => {
                for_each_assignment(batch_size, c, |assign| {
                    let w: f64 = batch.iter().zip(assign).map(|(&i, &k)| table.probs[i][k]).product();
                    s.iter_mut().for_each(|v| *v = 0.0);
                    for (&i, &k) in batch.iter().zip(assign) {
                        for (acc, g) in s.iter_mut().zip(&table.grads[i][k]) {
                            *acc += g;
                        }
                    }
                    for (o, v) in out.iter_mut().zip(&s) {
                        *o += factor * w * v * v;
                    }
                });
            }
            nn::LabelSource::Empirical => {
                s.iter_mut().for_each(|v| *v = 0.0);
                for &i in batch {
                    let y = data.labels()[i].class().expect("softmax labels");
                    let k = table
                        .classes
                        .iter()
                        .position(|&c| c == y)
                        .ok_or_else(|| Error::Input(format!("label {y} not among active classes")))?;
                    for (acc, g) in s.iter_mut().zip(&table.grads[i][k]) {
                        *acc += g;
                    }
                }
                for (o, v) in out.iter_mut().zip(&s) {
                    *o += factor * v * v;
                }
            }
        }
    }
    let meta = FisherMeta {
        batch_size: Some(batch_size),
        ..FisherMeta::default()
    };
    FisherDiagonal::new(params.with_values(out)?, FisherKind::MinibatchJoint, Scaling::SumOverN, n, meta)
}

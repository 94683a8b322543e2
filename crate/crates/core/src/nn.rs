//! Dense MLPs with hand-written reverse-mode differentiation.
//!
//! The engine records the post-activation of every layer on the forward pass
//! and replays the affine/activation chain backwards. Parameters live in a
//! single [`ParamVector`] with groups `layer{i}.weight` (row-major,
//! `out x in`) and `layer{i}.bias`.

use rand::Rng as _;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::params::{ParamGroup, ParamVector};
use crate::rng::Rng;
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    Relu,
    Tanh,
}

impl Activation {
    fn apply(self, z: f64) -> f64 {
        match self {
            Activation::Relu => z.max(0.0),
            Activation::Tanh => z.tanh(),
        }
    }

    /// Derivative expressed through the post-activation value.
    fn derivative_from_output(self, a: f64) -> f64 {
        match self {
            Activation::Relu => {
                if a > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Activation::Tanh => 1.0 - a * a,
        }
    }
}

/// Loss head. Both heads are negative log-likelihoods: softmax cross-entropy
/// for a categorical label, `0.5 * |f - y|^2` for a unit-variance Gaussian.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Head {
    SoftmaxXent,
    Mse,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct MlpSpec {
    pub layer_sizes: Vec<usize>,
    pub activation: Activation,
    pub head: Head,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Label {
    Class(usize),
    Real(Vec<f64>),
}

impl Label {
    pub fn class(&self) -> Option<usize> {
        match self {
            Label::Class(c) => Some(*c),
            Label::Real(_) => None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LabelSource {
    Empirical,
    Sampled,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PerExampleGradient {
    pub grad: ParamVector,
    pub example_index: usize,
    pub label_source: LabelSource,
}

impl MlpSpec {
    pub fn new(layer_sizes: Vec<usize>, activation: Activation, head: Head) -> Result<Self> {
        let spec = Self {
            layer_sizes,
            activation,
            head,
        };
        spec.validate()?;
        Ok(spec)
    }

    pub fn validate(&self) -> Result<()> {
        if self.layer_sizes.len() < 2 {
            return Err(Error::Input(format!(
                "an MLP needs at least two layer sizes, got {:?}",
                self.layer_sizes
            )));
        }
        if self.layer_sizes.contains(&0) {
            return Err(Error::Input(format!(
                "layer sizes must be positive, got {:?}",
                self.layer_sizes
            )));
        }
        Ok(())
    }

    pub fn input_dim(&self) -> usize {
        self.layer_sizes[0]
    }

    pub fn output_dim(&self) -> usize {
        *self.layer_sizes.last().expect("validated spec")
    }

    pub fn num_layers(&self) -> usize {
        self.layer_sizes.len() - 1
    }

    pub fn num_params(&self) -> usize {
        self.layer_sizes
            .windows(2)
            .map(|w| w[0] * w[1] + w[1])
            .sum()
    }

    /// Group table of the flat parameter vector.
    pub fn layout(&self) -> Vec<ParamGroup> {
        let mut groups = Vec::with_capacity(2 * self.num_layers());
        let mut offset = 0;
        for (i, w) in self.layer_sizes.windows(2).enumerate() {
            let (fan_in, fan_out) = (w[0], w[1]);
            groups.push(ParamGroup {
                name: format!("layer{i}.weight"),
                offset,
                len: fan_in * fan_out,
            });
            offset += fan_in * fan_out;
            groups.push(ParamGroup {
                name: format!("layer{i}.bias"),
                offset,
                len: fan_out,
            });
            offset += fan_out;
        }
        groups
    }

    pub fn zeros(&self) -> ParamVector {
        ParamVector::new(vec![0.0; self.num_params()], self.layout()).expect("layout covers vector")
    }

    pub fn check_params(&self, params: &ParamVector) -> Result<()> {
        crate::params::ensure_same_layout(params.groups(), &self.layout(), "parameters vs MLP spec")
    }

    fn check_label(&self, y: &Label, active: Option<&[usize]>) -> Result<()> {
        match (self.head, y) {
            (Head::SoftmaxXent, Label::Class(c)) => {
                if *c >= self.output_dim() {
                    return Err(Error::Input(format!(
                        "class label {c} outside [0, {})",
                        self.output_dim()
                    )));
                }
                if let Some(active) = active {
                    if !active.contains(c) {
                        return Err(Error::Input(format!(
                            "class label {c} not among active classes {active:?}"
                        )));
                    }
                }
                Ok(())
            }
            (Head::Mse, Label::Real(v)) if v.len() == self.output_dim() => Ok(()),
            (Head::Mse, Label::Real(v)) => Err(Error::Input(format!(
                "regression label has {} values, output has {}",
                v.len(),
                self.output_dim()
            ))),
            (head, _) => Err(Error::Input(format!(
                "label type does not match the {head:?} head"
            ))),
        }
    }
}

/// He-style Gaussian initialization (`std = gain / sqrt(fan_in)`), zero biases.
pub fn init_params(spec: &MlpSpec, rng: &mut Rng) -> ParamVector {
    let gain = match spec.activation {
        Activation::Relu => 2f64.sqrt(),
        Activation::Tanh => 1.0,
    };
    let mut params = spec.zeros();
    let values = params.values_mut();
    let mut offset = 0;
    for w in spec.layer_sizes.windows(2) {
        let (fan_in, fan_out) = (w[0], w[1]);
        let std = gain / (fan_in as f64).sqrt();
        for v in &mut values[offset..offset + fan_in * fan_out] {
            let z: f64 = StandardNormal.sample(rng);
            *v = std * z;
        }
        offset += fan_in * fan_out + fan_out;
    }
    params
}

/// Runs the network and returns every layer's output (input first, raw
/// output last).
fn forward_trace(spec: &MlpSpec, w: &[f64], x: &[f64]) -> Vec<Vec<f64>> {
    let mut trace = Vec::with_capacity(spec.layer_sizes.len());
    trace.push(x.to_vec());
    let mut offset = 0;
    let last = spec.num_layers() - 1;
    for (l, sizes) in spec.layer_sizes.windows(2).enumerate() {
        let (fan_in, fan_out) = (sizes[0], sizes[1]);
        let weights = &w[offset..offset + fan_in * fan_out];
        let bias = &w[offset + fan_in * fan_out..offset + fan_in * fan_out + fan_out];
        let input = &trace[l];
        let mut out = Vec::with_capacity(fan_out);
        for (row, b) in weights.chunks_exact(fan_in).zip(bias) {
            let z = row.iter().zip(input).fold(*b, |acc, (a, x)| acc + a * x);
            out.push(if l == last { z } else { spec.activation.apply(z) });
        }
        trace.push(out);
        offset += fan_in * fan_out + fan_out;
    }
    trace
}

/// Softmax over the active classes; inactive classes get probability 0.
fn softmax(logits: &[f64], active: Option<&[usize]>) -> Vec<f64> {
    let mut probs = vec![0.0; logits.len()];
    let is_active = |c: usize| active.is_none_or(|a| a.contains(&c));
    let max = (0..logits.len())
        .filter(|&c| is_active(c))
        .map(|c| logits[c])
        .fold(f64::NEG_INFINITY, f64::max);
    let mut total = 0.0;
    for c in 0..logits.len() {
        if is_active(c) {
            probs[c] = (logits[c] - max).exp();
            total += probs[c];
        }
    }
    for p in &mut probs {
        *p /= total;
    }
    probs
}

fn log_sum_exp(logits: &[f64], active: Option<&[usize]>) -> f64 {
    let is_active = |c: usize| active.is_none_or(|a| a.contains(&c));
    let max = (0..logits.len())
        .filter(|&c| is_active(c))
        .map(|c| logits[c])
        .fold(f64::NEG_INFINITY, f64::max);
    let sum: f64 = (0..logits.len())
        .filter(|&c| is_active(c))
        .map(|c| (logits[c] - max).exp())
        .sum();
    max + sum.ln()
}

/// Loss of one example plus `scale * gradient` added into `out`.
pub(crate) fn accumulate_example(
    spec: &MlpSpec,
    w: &[f64],
    x: &[f64],
    y: &Label,
    active: Option<&[usize]>,
    scale: f64,
    out: &mut [f64],
) -> f64 {
    let trace = forward_trace(spec, w, x);
    let output = trace.last().expect("non-empty trace");
    let (loss, mut delta) = match (spec.head, y) {
        (Head::SoftmaxXent, Label::Class(c)) => {
            let loss = log_sum_exp(output, active) - output[*c];
            let mut d = softmax(output, active);
            d[*c] -= 1.0;
            (loss, d)
        }
        (Head::Mse, Label::Real(t)) => {
            let d: Vec<f64> = output.iter().zip(t).map(|(f, t)| f - t).collect();
            (0.5 * d.iter().map(|v| v * v).sum::<f64>(), d)
        }
        _ => unreachable!("labels are validated before accumulation"),
    };

    let mut offsets = Vec::with_capacity(spec.num_layers());
    let mut offset = 0;
    for sizes in spec.layer_sizes.windows(2) {
        offsets.push(offset);
        offset += sizes[0] * sizes[1] + sizes[1];
    }

    for l in (0..spec.num_layers()).rev() {
        let (fan_in, fan_out) = (spec.layer_sizes[l], spec.layer_sizes[l + 1]);
        let off = offsets[l];
        let input = &trace[l];
        {
            let (gw, gb) = out[off..off + fan_in * fan_out + fan_out].split_at_mut(fan_in * fan_out);
            for (o, d) in delta.iter().enumerate() {
                let sd = scale * d;
                if sd != 0.0 {
                    for (g, a) in gw[o * fan_in..(o + 1) * fan_in].iter_mut().zip(input) {
                        *g += sd * a;
                    }
                }
                gb[o] += sd;
            }
        }
        if l > 0 {
            let weights = &w[off..off + fan_in * fan_out];
            let mut prev = vec![0.0; fan_in];
            for (o, d) in delta.iter().enumerate() {
                if *d != 0.0 {
                    for (p, wv) in prev.iter_mut().zip(&weights[o * fan_in..(o + 1) * fan_in]) {
                        *p += wv * d;
                    }
                }
            }
            for (p, a) in prev.iter_mut().zip(input) {
                *p *= spec.activation.derivative_from_output(*a);
            }
            delta = prev;
        }
    }
    loss
}

fn check_input(spec: &MlpSpec, x: &[f64]) -> Result<()> {
    if x.len() != spec.input_dim() {
        return Err(Error::Layout(format!(
            "input has {} features, network expects {}",
            x.len(),
            spec.input_dim()
        )));
    }
    Ok(())
}

/// Network output for a single input (`[d]`) or a batch (`[n, d]`).
pub fn forward(spec: &MlpSpec, params: &ParamVector, x: &Tensor) -> Result<Tensor> {
    spec.check_params(params)?;
    let single = x.shape().len() == 1;
    if x.row_len() != spec.input_dim() || x.shape().len() > 2 {
        return Err(Error::Layout(format!(
            "input of shape {:?} does not match input width {}",
            x.shape(),
            spec.input_dim()
        )));
    }
    let rows = if single { 1 } else { x.rows() };
    let mut data = Vec::with_capacity(rows * spec.output_dim());
    for r in 0..rows {
        let trace = forward_trace(spec, params.values(), x.row(r));
        data.extend_from_slice(trace.last().expect("non-empty trace"));
    }
    let shape = if single {
        vec![spec.output_dim()]
    } else {
        vec![rows, spec.output_dim()]
    };
    Ok(Tensor::from_parts_unchecked(shape, data))
}

/// Raw network output for one input row.
pub fn output(spec: &MlpSpec, params: &ParamVector, x: &[f64]) -> Result<Vec<f64>> {
    spec.check_params(params)?;
    check_input(spec, x)?;
    Ok(forward_trace(spec, params.values(), x).pop().expect("non-empty trace"))
}

/// Per-example loss and its exact gradient.
pub fn loss_and_grad(
    spec: &MlpSpec,
    params: &ParamVector,
    x: &Tensor,
    y: &Label,
) -> Result<(f64, ParamVector)> {
    loss_and_grad_masked(spec, params, x.data(), y, None)
}

/// [`loss_and_grad`] with the softmax restricted to `active` classes.
pub fn loss_and_grad_masked(
    spec: &MlpSpec,
    params: &ParamVector,
    x: &[f64],
    y: &Label,
    active: Option<&[usize]>,
) -> Result<(f64, ParamVector)> {
    spec.check_params(params)?;
    check_input(spec, x)?;
    spec.check_label(y, active)?;
    let mut grad = ParamVector::zeros_like(params);
    let loss = accumulate_example(spec, params.values(), x, y, active, 1.0, grad.values_mut());
    Ok((loss, grad))
}

fn check_dataset(spec: &MlpSpec, params: &ParamVector, data: &Dataset) -> Result<()> {
    spec.check_params(params)?;
    if data.inputs().row_len() != spec.input_dim() {
        return Err(Error::Layout(format!(
            "dataset has {} features, network expects {}",
            data.inputs().row_len(),
            spec.input_dim()
        )));
    }
    for y in data.labels() {
        spec.check_label(y, data.active_classes())?;
    }
    Ok(())
}

/// Mean loss and mean gradient over `indices` in one aggregated pass.
pub fn batch_loss_and_grad(
    spec: &MlpSpec,
    params: &ParamVector,
    data: &Dataset,
    indices: &[usize],
) -> Result<(f64, ParamVector)> {
    check_dataset(spec, params, data)?;
    if indices.is_empty() {
        return Err(Error::Input("empty batch".into()));
    }
    let scale = 1.0 / indices.len() as f64;
    let mut grad = ParamVector::zeros_like(params);
    let mut loss = 0.0;
    for &i in indices {
        loss += accumulate_example(
            spec,
            params.values(),
            data.inputs().row(i),
            &data.labels()[i],
            data.active_classes(),
            scale,
            grad.values_mut(),
        );
    }
    Ok((loss * scale, grad))
}

/// Mean loss over the whole dataset.
pub fn mean_loss(spec: &MlpSpec, params: &ParamVector, data: &Dataset) -> Result<f64> {
    check_dataset(spec, params, data)?;
    let mut total = 0.0;
    for i in 0..data.len() {
        let out = forward_trace(spec, params.values(), data.inputs().row(i))
            .pop()
            .expect("non-empty trace");
        total += match (&data.labels()[i], spec.head) {
            (Label::Class(c), _) => log_sum_exp(&out, data.active_classes()) - out[*c],
            (Label::Real(t), _) => {
                0.5 * out.iter().zip(t).map(|(f, t)| (f - t) * (f - t)).sum::<f64>()
            }
        };
    }
    Ok(total / data.len() as f64)
}

/// One independent backward pass per example, in example order.
pub fn per_example_grads(
    spec: &MlpSpec,
    params: &ParamVector,
    data: &Dataset,
) -> Result<Vec<PerExampleGradient>> {
    check_dataset(spec, params, data)?;
    if data.is_empty() {
        return Err(Error::Input("per-example gradients need a nonempty batch".into()));
    }
    Ok((0..data.len())
        .map(|i| {
            let mut grad = ParamVector::zeros_like(params);
            accumulate_example(
                spec,
                params.values(),
                data.inputs().row(i),
                &data.labels()[i],
                data.active_classes(),
                1.0,
                grad.values_mut(),
            );
            PerExampleGradient {
                grad,
                example_index: i,
                label_source: LabelSource::Empirical,
            }
        })
        .collect())
}

/// Class probabilities of the model's likelihood at `x` (zero outside `active`).
pub fn class_probabilities(
    spec: &MlpSpec,
    params: &ParamVector,
    x: &[f64],
    active: Option<&[usize]>,
) -> Result<Vec<f64>> {
    if spec.head != Head::SoftmaxXent {
        return Err(Error::Input("class probabilities need a softmax head".into()));
    }
    let out = output(spec, params, x)?;
    Ok(softmax(&out, active))
}

/// Draws a label from the model's predictive distribution.
pub fn sample_label(
    spec: &MlpSpec,
    params: &ParamVector,
    x: &Tensor,
    rng: &mut Rng,
) -> Result<Label> {
    sample_label_masked(spec, params, x.data(), None, rng)
}

pub fn sample_label_masked(
    spec: &MlpSpec,
    params: &ParamVector,
    x: &[f64],
    active: Option<&[usize]>,
    rng: &mut Rng,
) -> Result<Label> {
    let out = output(spec, params, x)?;
    Ok(match spec.head {
        Head::SoftmaxXent => {
            let probs = softmax(&out, active);
            let u: f64 = rng.random();
            let mut cumulative = 0.0;
            let mut chosen = None;
            for (c, p) in probs.iter().enumerate() {
                if *p > 0.0 {
                    cumulative += p;
                    chosen = Some(c);
                    if u < cumulative {
                        break;
                    }
                }
            }
            Label::Class(chosen.expect("softmax has positive mass"))
        }
        Head::Mse => Label::Real(
            out.iter()
                .map(|m| {
                    let z: f64 = StandardNormal.sample(rng);
                    m + z
                })
                .collect(),
        ),
    })
}

/// Arg-max class restricted to the dataset's active classes.
pub fn predict_class(output: &[f64], active: Option<&[usize]>) -> usize {
    let mut best = None::<(usize, f64)>;
    for (c, v) in output.iter().enumerate() {
        if active.is_some_and(|a| !a.contains(&c)) {
            continue;
        }
        if best.is_none_or(|(_, b)| *v > b) {
            best = Some((c, *v));
        }
    }
    best.map(|(c, _)| c).unwrap_or(0)
}

/// Fraction of correctly classified examples.
pub fn accuracy(spec: &MlpSpec, params: &ParamVector, data: &Dataset) -> Result<f64> {
    check_dataset(spec, params, data)?;
    if spec.head != Head::SoftmaxXent {
        return Err(Error::Input("accuracy needs a softmax head".into()));
    }
    if data.is_empty() {
        return Err(Error::Input("accuracy of an empty dataset".into()));
    }
    let correct = (0..data.len())
        .filter(|&i| {
            let out = forward_trace(spec, params.values(), data.inputs().row(i))
                .pop()
                .expect("non-empty trace");
            Some(predict_class(&out, data.active_classes())) == data.labels()[i].class()
        })
        .count();
    Ok(correct as f64 / data.len() as f64)
}

//! Datasets, deterministic synthetic task generators and an IDX loader.

use std::path::Path;

use rand::seq::SliceRandom;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::container::{self, DATASET_MAGIC};
use crate::error::{Error, Result};
use crate::nn::Label;
use crate::rng::{self, purpose};
use crate::tensor::Tensor;

/// Inputs (`[n, d]`), labels and an optional restriction of the softmax to a
/// subset of classes (task-incremental output masking).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Dataset {
    inputs: Tensor,
    labels: Vec<Label>,
    active_classes: Option<Vec<usize>>,
}

impl Dataset {
    pub fn new(inputs: Tensor, labels: Vec<Label>, active_classes: Option<Vec<usize>>) -> Result<Self> {
        if inputs.shape().len() != 2 {
            return Err(Error::Layout(format!(
                "dataset inputs must be a [n, d] matrix, got shape {:?}",
                inputs.shape()
            )));
        }
        if inputs.rows() != labels.len() {
            return Err(Error::Input(format!(
                "{} input rows but {} labels",
                inputs.rows(),
                labels.len()
            )));
        }
        Ok(Self {
            inputs,
            labels,
            active_classes,
        })
    }

    pub fn inputs(&self) -> &Tensor {
        &self.inputs
    }

    pub fn labels(&self) -> &[Label] {
        &self.labels
    }

    pub fn active_classes(&self) -> Option<&[usize]> {
        self.active_classes.as_deref()
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn dims(&self) -> usize {
        self.inputs.row_len()
    }

    pub fn subset(&self, indices: &[usize]) -> Dataset {
        Dataset {
            inputs: self.inputs.select_rows(indices),
            labels: indices.iter().map(|&i| self.labels[i].clone()).collect(),
            active_classes: self.active_classes.clone(),
        }
    }

    pub fn with_active_classes(mut self, active: Option<Vec<usize>>) -> Self {
        self.active_classes = active;
        self
    }

    /// Same dataset with labels rewritten by `f`.
    pub fn map_labels(&self, f: impl Fn(&Label) -> Label) -> Dataset {
        Dataset {
            inputs: self.inputs.clone(),
            labels: self.labels.iter().map(f).collect(),
            active_classes: self.active_classes.clone(),
        }
    }

    /// Applies a fixed feature permutation: output feature `j` is input
    /// feature `perm[j]`.
    pub fn permute_features(&self, perm: &[usize]) -> Result<Dataset> {
        let d = self.dims();
        let mut seen = vec![false; d];
        if perm.len() != d || perm.iter().any(|&p| p >= d || std::mem::replace(&mut seen[p], true)) {
            return Err(Error::Input(format!("not a permutation of {d} features")));
        }
        let mut data = Vec::with_capacity(self.inputs.len());
        for i in 0..self.len() {
            let row = self.inputs.row(i);
            data.extend(perm.iter().map(|&p| row[p]));
        }
        Ok(Dataset {
            inputs: Tensor::from_parts_unchecked(vec![self.len(), d], data),
            labels: self.labels.clone(),
            active_classes: self.active_classes.clone(),
        })
    }

    /// Concatenates datasets with identical feature width; the active-class
    /// restriction of the first is kept.
    pub fn concat(parts: &[Dataset]) -> Result<Dataset> {
        let first = parts
            .first()
            .ok_or_else(|| Error::Input("nothing to concatenate".into()))?;
        let d = first.dims();
        let mut data = Vec::new();
        let mut labels = Vec::new();
        for p in parts {
            if p.dims() != d {
                return Err(Error::Layout("feature widths differ".into()));
            }
            data.extend_from_slice(p.inputs.data());
            labels.extend(p.labels.iter().cloned());
        }
        Ok(Dataset {
            inputs: Tensor::from_parts_unchecked(vec![labels.len(), d], data),
            labels,
            active_classes: first.active_classes.clone(),
        })
    }
}

pub const DATASET_FORMAT_VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct DatasetHeader {
    rows: usize,
    dims: usize,
    /// `None` for class labels, otherwise the width of real-valued targets.
    target_width: Option<usize>,
    active_classes: Option<Vec<usize>>,
}

impl Dataset {
    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let target_width = match self.labels.first() {
            Some(Label::Real(t)) => Some(t.len()),
            _ => None,
        };
        let mut targets = Vec::new();
        for y in &self.labels {
            match (y, target_width) {
                (Label::Class(c), None) => targets.push(*c as f64),
                (Label::Real(t), Some(w)) if t.len() == w => targets.extend_from_slice(t),
                _ => return Err(Error::Input("dataset mixes label kinds or widths".into())),
            }
        }
        let header = DatasetHeader {
            rows: self.len(),
            dims: self.dims(),
            target_width,
            active_classes: self.active_classes.clone(),
        };
        container::encode(
            DATASET_MAGIC,
            DATASET_FORMAT_VERSION,
            &header,
            &[("inputs", self.inputs.data()), ("labels", &targets)],
        )
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let (h, arrays): (DatasetHeader, _) =
            container::decode(bytes, DATASET_MAGIC, DATASET_FORMAT_VERSION, &["inputs", "labels"])?;
        let inputs = Tensor::new(vec![h.rows, h.dims], arrays[0].clone())
            .map_err(|e| Error::format("inputs", e.to_string()))?;
        let labels = match h.target_width {
            None => arrays[1]
                .iter()
                .map(|&c| {
                    if c >= 0.0 && c.fract() == 0.0 {
                        Ok(Label::Class(c as usize))
                    } else {
                        Err(Error::format("labels", format!("{c} is not a class index")))
                    }
                })
                .collect::<Result<Vec<_>>>()?,
            Some(w) if w > 0 && arrays[1].len() == w * h.rows => {
                arrays[1].chunks(w).map(|t| Label::Real(t.to_vec())).collect()
            }
            Some(_) => return Err(Error::format("labels", "target width does not match row count")),
        };
        Dataset::new(inputs, labels, h.active_classes).map_err(|e| Error::format("labels", e.to_string()))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes()?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&std::fs::read(path)?)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GeneratorKind {
    GaussianBlobs,
    SplitClasses,
    PermutedFeatures,
}

fn default_classes_per_task() -> usize {
    2
}
fn default_num_tasks() -> usize {
    5
}
fn default_center_scale() -> f64 {
    1.0
}

/// Recipe for a synthetic task stream. Identical specs give bit-identical
/// streams.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GeneratorSpec {
    pub kind: GeneratorKind,
    pub dims: usize,
    pub classes: usize,
    pub samples_per_class: usize,
    /// Test examples per class; defaults to a quarter of `samples_per_class`.
    #[serde(default)]
    pub test_samples_per_class: Option<usize>,
    pub noise_scale: f64,
    pub seed: u64,
    /// Standard deviation of the class centroids.
    #[serde(default = "default_center_scale")]
    pub center_scale: f64,
    #[serde(default = "default_classes_per_task")]
    pub classes_per_task: usize,
    /// Number of permuted copies (`permuted_features` only).
    #[serde(default = "default_num_tasks")]
    pub num_tasks: usize,
    /// Use the identity permutation for every task (`permuted_features` only).
    #[serde(default)]
    pub identity_permutations: bool,
}

impl GeneratorSpec {
    pub fn blobs(dims: usize, classes: usize, samples_per_class: usize, noise_scale: f64, seed: u64) -> Self {
        Self {
            kind: GeneratorKind::GaussianBlobs,
            dims,
            classes,
            samples_per_class,
            test_samples_per_class: None,
            noise_scale,
            seed,
            center_scale: 1.0,
            classes_per_task: 2,
            num_tasks: 1,
            identity_permutations: false,
        }
    }

    fn test_per_class(&self) -> usize {
        self.test_samples_per_class
            .unwrap_or_else(|| (self.samples_per_class / 4).max(1))
    }

    pub fn validate(&self) -> Result<()> {
        if self.dims == 0 || self.classes == 0 || self.samples_per_class == 0 {
            return Err(Error::Input(
                "dims, classes and samples_per_class must be positive".into(),
            ));
        }
        if !(self.noise_scale >= 0.0 && self.noise_scale.is_finite()) {
            return Err(Error::Input("noise_scale must be finite and nonnegative".into()));
        }
        if !(self.center_scale >= 0.0 && self.center_scale.is_finite()) {
            return Err(Error::Input("center_scale must be finite and nonnegative".into()));
        }
        match self.kind {
            GeneratorKind::SplitClasses => {
                if self.classes_per_task == 0 || self.classes % self.classes_per_task != 0 {
                    return Err(Error::Input(format!(
                        "{} classes cannot be split into contexts of {}",
                        self.classes, self.classes_per_task
                    )));
                }
            }
            GeneratorKind::PermutedFeatures => {
                if self.num_tasks == 0 {
                    return Err(Error::Input("num_tasks must be positive".into()));
                }
            }
            GeneratorKind::GaussianBlobs => {}
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Task {
    pub task_id: usize,
    pub train: Dataset,
    pub test: Dataset,
    pub num_classes: usize,
    /// Labels that occur in this task.
    pub classes: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TaskStream {
    pub tasks: Vec<Task>,
}

/// How task identity is exposed to the learner.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Scenario {
    /// Softmax restricted to the current task's classes.
    #[default]
    Task,
    /// Labels rewritten to their position within the task; shared output.
    Domain,
    /// No restriction: a single softmax over every class seen.
    Class,
}

impl TaskStream {
    /// Output width needed by a network trained on this stream.
    pub fn output_dim(&self, scenario: Scenario) -> usize {
        match scenario {
            Scenario::Domain => self.tasks.iter().map(|t| t.classes.len()).max().unwrap_or(0),
            _ => self.tasks.iter().map(|t| t.num_classes).max().unwrap_or(0),
        }
    }

    pub fn with_scenario(&self, scenario: Scenario) -> TaskStream {
        let tasks = self
            .tasks
            .iter()
            .map(|t| {
                let (train, test) = match scenario {
                    Scenario::Task => (
                        t.train.clone().with_active_classes(Some(t.classes.clone())),
                        t.test.clone().with_active_classes(Some(t.classes.clone())),
                    ),
                    Scenario::Class => (
                        t.train.clone().with_active_classes(None),
                        t.test.clone().with_active_classes(None),
                    ),
                    Scenario::Domain => {
                        let classes = t.classes.clone();
                        let relabel = |y: &Label| match y {
                            Label::Class(c) => Label::Class(
                                classes.iter().position(|k| k == c).expect("label in task"),
                            ),
                            other => other.clone(),
                        };
                        (
                            t.train.map_labels(relabel).with_active_classes(None),
                            t.test.map_labels(relabel).with_active_classes(None),
                        )
                    }
                };
                Task {
                    task_id: t.task_id,
                    train,
                    test,
                    num_classes: t.num_classes,
                    classes: t.classes.clone(),
                }
            })
            .collect();
        TaskStream { tasks }
    }
}

fn gaussian_rows(
    centroid: &[f64],
    count: usize,
    noise: f64,
    rng: &mut rng::Rng,
) -> Vec<f64> {
    let mut out = Vec::with_capacity(count * centroid.len());
    for _ in 0..count {
        for c in centroid {
            let z: f64 = StandardNormal.sample(rng);
            out.push(c + noise * z);
        }
    }
    out
}

fn centroids(spec: &GeneratorSpec) -> Vec<Vec<f64>> {
    let mut r = rng::stream(spec.seed, &[purpose::CENTROIDS]);
    (0..spec.classes)
        .map(|_| {
            (0..spec.dims)
                .map(|_| {
                    let z: f64 = StandardNormal.sample(&mut r);
                    spec.center_scale * z
                })
                .collect()
        })
        .collect()
}

/// Examples of the listed classes; train and test come from separate streams
/// keyed per class so the two splits never share draws.
fn class_split(spec: &GeneratorSpec, cents: &[Vec<f64>], classes: &[usize]) -> (Dataset, Dataset) {
    let build = |split: u64, per_class: usize| {
        let mut data = Vec::new();
        let mut labels = Vec::new();
        for &c in classes {
            let mut r = rng::stream(spec.seed, &[split, c as u64]);
            data.extend(gaussian_rows(&cents[c], per_class, spec.noise_scale, &mut r));
            labels.extend(std::iter::repeat_n(Label::Class(c), per_class));
        }
        let inputs = Tensor::from_parts_unchecked(vec![labels.len(), spec.dims], data);
        Dataset::new(inputs, labels, None).expect("consistent rows")
    };
    (
        build(purpose::DATA_TRAIN, spec.samples_per_class),
        build(purpose::DATA_TEST, spec.test_per_class()),
    )
}

/// Fixed random permutation for task `task` (identity for task 0).
pub fn task_permutation(seed: u64, dims: usize, task: usize) -> Vec<usize> {
    let mut perm: Vec<usize> = (0..dims).collect();
    if task > 0 {
        let mut r = rng::stream(seed, &[purpose::PERMUTATION, task as u64]);
        perm.shuffle(&mut r);
    }
    perm
}

/// Builds the task stream described by `spec`.
pub fn generate(spec: &GeneratorSpec) -> Result<TaskStream> {
    spec.validate()?;
    let cents = centroids(spec);
    let all: Vec<usize> = (0..spec.classes).collect();
    let tasks = match spec.kind {
        GeneratorKind::GaussianBlobs => {
            let (train, test) = class_split(spec, &cents, &all);
            vec![Task {
                task_id: 0,
                train,
                test,
                num_classes: spec.classes,
                classes: all,
            }]
        }
        GeneratorKind::SplitClasses => all
            .chunks(spec.classes_per_task)
            .enumerate()
            .map(|(i, classes)| {
                let (train, test) = class_split(spec, &cents, classes);
                Task {
                    task_id: i,
                    train,
                    test,
                    num_classes: spec.classes,
                    classes: classes.to_vec(),
                }
            })
            .collect(),
        GeneratorKind::PermutedFeatures => {
            let (train, test) = class_split(spec, &cents, &all);
            (0..spec.num_tasks)
                .map(|i| {
                    let perm = if spec.identity_permutations {
                        (0..spec.dims).collect()
                    } else {
                        task_permutation(spec.seed, spec.dims, i)
                    };
                    Ok(Task {
                        task_id: i,
                        train: train.permute_features(&perm)?,
                        test: test.permute_features(&perm)?,
                        num_classes: spec.classes,
                        classes: all.clone(),
                    })
                })
                .collect::<Result<Vec<_>>>()?
        }
    };
    Ok(TaskStream { tasks })
}

const IDX_IMAGES_MAGIC: u32 = 0x0000_0803;
const IDX_LABELS_MAGIC: u32 = 0x0000_0801;

fn be_u32(bytes: &[u8], offset: usize, field: &str) -> Result<u32> {
    bytes
        .get(offset..offset + 4)
        .map(|b| u32::from_be_bytes([b[0], b[1], b[2], b[3]]))
        .ok_or_else(|| Error::format(field, format!("file truncated at offset {offset}")))
}

/// Decodes an IDX image file into an `[n, rows*cols]` tensor scaled to [0, 1].
pub fn parse_idx_images(bytes: &[u8]) -> Result<Tensor> {
    let magic = be_u32(bytes, 0, "images.magic")?;
    if magic != IDX_IMAGES_MAGIC {
        return Err(Error::format(
            "images.magic",
            format!("expected 0x{IDX_IMAGES_MAGIC:08x}, found 0x{magic:08x} at offset 0"),
        ));
    }
    let n = be_u32(bytes, 4, "images.count")? as usize;
    let rows = be_u32(bytes, 8, "images.rows")? as usize;
    let cols = be_u32(bytes, 12, "images.cols")? as usize;
    let need = 16 + n * rows * cols;
    if bytes.len() < need {
        return Err(Error::format(
            "images.pixels",
            format!("file truncated at offset {}, expected {need} bytes", bytes.len()),
        ));
    }
    let data = bytes[16..need].iter().map(|&p| p as f64 / 255.0).collect();
    Ok(Tensor::from_parts_unchecked(vec![n, rows * cols], data))
}

pub fn parse_idx_labels(bytes: &[u8]) -> Result<Vec<Label>> {
    let magic = be_u32(bytes, 0, "labels.magic")?;
    if magic != IDX_LABELS_MAGIC {
        return Err(Error::format(
            "labels.magic",
            format!("expected 0x{IDX_LABELS_MAGIC:08x}, found 0x{magic:08x} at offset 0"),
        ));
    }
    let n = be_u32(bytes, 4, "labels.count")? as usize;
    if bytes.len() < 8 + n {
        return Err(Error::format(
            "labels.values",
            format!("file truncated at offset {}, expected {} bytes", bytes.len(), 8 + n),
        ));
    }
    Ok(bytes[8..8 + n].iter().map(|&c| Label::Class(c as usize)).collect())
}

/// Loads an IDX image/label file pair (the classic MNIST distribution format).
pub fn load_idx(images_path: &Path, labels_path: &Path) -> Result<(Tensor, Vec<Label>)> {
    let images = parse_idx_images(&std::fs::read(images_path)?)?;
    let labels = parse_idx_labels(&std::fs::read(labels_path)?)?;
    if images.rows() != labels.len() {
        return Err(Error::format(
            "labels.count",
            format!(
                "count mismatch at offset 4: {} images but {} labels",
                images.rows(),
                labels.len()
            ),
        ));
    }
    Ok((images, labels))
}

//! SGD, Adam and AdamW with an inspectable second-moment accumulator, plus
//! checkpoints that persist it.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::container::{self, CHECKPOINT_MAGIC};
use crate::error::{Error, Result};
use crate::nn::MlpSpec;
use crate::params::{ParamGroup, ParamVector};

/// Bias correction applied when the accumulator is exported for reuse.
pub const DEFAULT_BIAS_CORRECTION: bool = true;

pub const CHECKPOINT_FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OptimizerKind {
    Sgd,
    Adam,
    AdamW,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Hyperparams {
    pub lr: f64,
    pub beta1: f64,
    /// Decay of the squared-gradient EMA.
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for Hyperparams {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.0,
        }
    }
}

impl Hyperparams {
    pub fn validate(&self) -> Result<()> {
        let unit = |x: f64| (0.0..1.0).contains(&x);
        if !(self.lr >= 0.0 && self.lr.is_finite()) {
            return Err(Error::Input(format!("lr must be finite and >= 0, got {}", self.lr)));
        }
        if !unit(self.beta1) || !unit(self.beta2) {
            return Err(Error::Input(format!(
                "beta1/beta2 must lie in [0, 1), got {}/{}",
                self.beta1, self.beta2
            )));
        }
        if !(self.eps > 0.0) || !(self.weight_decay >= 0.0) {
            return Err(Error::Input("eps must be > 0 and weight_decay >= 0".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct OptimizerState {
    pub kind: OptimizerKind,
    pub t: u64,
    pub m: ParamVector,
    pub v: ParamVector,
    pub hyper: Hyperparams,
}

impl OptimizerState {
    pub fn new(kind: OptimizerKind, layout: &ParamVector, hyper: Hyperparams) -> Result<Self> {
        hyper.validate()?;
        Ok(Self {
            kind,
            t: 0,
            m: ParamVector::zeros_like(layout),
            v: ParamVector::zeros_like(layout),
            hyper,
        })
    }

    /// Pure update: returns the advanced state and the new parameters.
    pub fn step(&self, params: &ParamVector, grad: &ParamVector) -> Result<(OptimizerState, ParamVector)> {
        let mut state = self.clone();
        let mut params = params.clone();
        state.step_in_place(&mut params, grad)?;
        Ok((state, params))
    }

    /// In-place update with the mean-reduced batch gradient. On error neither
    /// the state nor the parameters change.
    pub fn step_in_place(&mut self, params: &mut ParamVector, grad: &ParamVector) -> Result<()> {
        params.ensure_compatible(grad, "optimizer step: gradient vs parameters")?;
        params.ensure_compatible(&self.v, "optimizer step: state vs parameters")?;
        if let Some(i) = grad.values().iter().position(|g| !g.is_finite()) {
            return Err(Error::Numeric(format!(
                "non-finite gradient {} at coordinate {i}",
                grad.values()[i]
            )));
        }
        let h = self.hyper;
        self.t += 1;
        match self.kind {
            OptimizerKind::Sgd => {
                for (p, g) in params.values_mut().iter_mut().zip(grad.values()) {
                    *p -= h.lr * (g + h.weight_decay * *p);
                }
            }
            OptimizerKind::Adam | OptimizerKind::AdamW => {
                let decoupled = self.kind == OptimizerKind::AdamW;
                let c1 = 1.0 - h.beta1.powf(self.t as f64);
                let c2 = 1.0 - h.beta2.powf(self.t as f64);
                let m = self.m.values_mut();
                let v = self.v.values_mut();
                for (i, (p, g)) in params.values_mut().iter_mut().zip(grad.values()).enumerate() {
                    // Adam folds L2 into the gradient; AdamW decays the weight directly.
                    let g = if decoupled { *g } else { g + h.weight_decay * *p };
                    m[i] = h.beta1 * m[i] + (1.0 - h.beta1) * g;
                    v[i] = h.beta2 * v[i] + (1.0 - h.beta2) * g * g;
                    let update = (m[i] / c1) / ((v[i] / c2).sqrt() + h.eps);
                    if decoupled {
                        *p -= h.lr * h.weight_decay * *p;
                    }
                    *p -= h.lr * update;
                }
            }
        }
        Ok(())
    }

    /// The squared-gradient accumulator `v`, optionally divided by `1 - beta2^t`.
    pub fn accumulator(&self, bias_corrected: bool) -> Result<ParamVector> {
        if self.kind == OptimizerKind::Sgd {
            return Err(Error::Unavailable("SGD keeps no squared-gradient accumulator".into()));
        }
        if self.t == 0 {
            return Err(Error::Unavailable("accumulator is empty before the first step".into()));
        }
        if !bias_corrected {
            return Ok(self.v.clone());
        }
        let c2 = 1.0 - self.hyper.beta2.powf(self.t as f64);
        let values = self.v.values().iter().map(|v| v / c2).collect();
        self.v.with_values(values)
    }
}

/// Steps for a unit impulse in the EMA to decay to `1/e`.
pub fn ema_time_constant(beta2: f64) -> f64 {
    -1.0 / beta2.ln()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Provenance {
    pub dataset_id: String,
    /// Number of training examples `N`.
    pub dataset_size: usize,
    /// Batch size `B` (partial batches are dropped, so it is constant).
    pub batch_size: usize,
    pub steps: u64,
    pub seed: u64,
    /// Checksums of parent checkpoints (merged models only).
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub parents: Vec<String>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub format_version: u32,
    pub mlp_spec: MlpSpec,
    pub params: ParamVector,
    pub optimizer_state: OptimizerState,
    pub provenance: Provenance,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct CheckpointHeader {
    mlp_spec: MlpSpec,
    provenance: Provenance,
    groups: Vec<ParamGroup>,
    optimizer: OptimizerHeader,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct OptimizerHeader {
    kind: OptimizerKind,
    t: u64,
    hyper: Hyperparams,
}

impl Checkpoint {
    pub fn new(
        mlp_spec: MlpSpec,
        params: ParamVector,
        optimizer_state: OptimizerState,
        provenance: Provenance,
    ) -> Result<Self> {
        let ckpt = Self {
            format_version: CHECKPOINT_FORMAT_VERSION,
            mlp_spec,
            params,
            optimizer_state,
            provenance,
        };
        ckpt.validate()?;
        Ok(ckpt)
    }

    pub fn validate(&self) -> Result<()> {
        self.mlp_spec.check_params(&self.params)?;
        self.params.ensure_compatible(&self.optimizer_state.m, "checkpoint: m vs params")?;
        self.params.ensure_compatible(&self.optimizer_state.v, "checkpoint: v vs params")?;
        if self.provenance.dataset_size == 0 || self.provenance.batch_size == 0 {
            return Err(Error::Input("provenance needs positive N and B".into()));
        }
        if self.provenance.steps != self.optimizer_state.t {
            return Err(Error::Input(format!(
                "provenance records {} steps but optimizer is at t={}",
                self.provenance.steps, self.optimizer_state.t
            )));
        }
        Ok(())
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let header = CheckpointHeader {
            mlp_spec: self.mlp_spec.clone(),
            provenance: self.provenance.clone(),
            groups: self.params.groups().to_vec(),
            optimizer: OptimizerHeader {
                kind: self.optimizer_state.kind,
                t: self.optimizer_state.t,
                hyper: self.optimizer_state.hyper,
            },
        };
        container::encode(
            CHECKPOINT_MAGIC,
            self.format_version,
            &header,
            &[
                ("params", self.params.values()),
                ("m", self.optimizer_state.m.values()),
                ("v", self.optimizer_state.v.values()),
            ],
        )
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let (h, mut arrays): (CheckpointHeader, _) = container::decode(
            bytes,
            CHECKPOINT_MAGIC,
            CHECKPOINT_FORMAT_VERSION,
            &["params", "m", "v"],
        )?;
        let v = arrays.pop().expect("three arrays");
        let m = arrays.pop().expect("three arrays");
        let p = arrays.pop().expect("three arrays");
        let wrap = |values: Vec<f64>, field: &str| {
            ParamVector::new(values, h.groups.clone())
                .map_err(|e| Error::format(field, e.to_string()))
        };
        let params = wrap(p, "params")?;
        let state = OptimizerState {
            kind: h.optimizer.kind,
            t: h.optimizer.t,
            m: wrap(m, "m")?,
            v: wrap(v, "v")?,
            hyper: h.optimizer.hyper,
        };
        let ckpt = Checkpoint {
            format_version: CHECKPOINT_FORMAT_VERSION,
            mlp_spec: h.mlp_spec,
            params,
            optimizer_state: state,
            provenance: h.provenance,
        };
        ckpt.validate()
            .map_err(|e| Error::format("groups", e.to_string()))?;
        Ok(ckpt)
    }

    /// Hex SHA-256 of the serialized checkpoint.
    pub fn checksum(&self) -> Result<String> {
        use sha2::{Digest, Sha256};
        Ok(hex::encode(Sha256::digest(self.to_bytes()?)))
    }
}

pub fn save_checkpoint(ckpt: &Checkpoint, path: &Path) -> Result<()> {
    std::fs::write(path, ckpt.to_bytes()?)?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    Checkpoint::from_bytes(&std::fs::read(path)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::{Activation, Head};

    fn layout(n: usize) -> ParamVector {
        ParamVector::ungrouped(vec![0.0; n])
    }

    fn adam(beta2: f64, lr: f64) -> OptimizerState {
        OptimizerState::new(
            OptimizerKind::Adam,
            &layout(2),
            Hyperparams { lr, beta2, ..Hyperparams::default() },
        )
        .unwrap()
    }

    #[test]
    fn memoryless_ema_stores_squared_gradient() {
        let g = ParamVector::ungrouped(vec![3.0, -0.5]);
        let (s, _) = adam(0.0, 0.1).step(&layout(2), &g).unwrap();
        assert_eq!(s.v.values(), &[9.0, 0.25]);
    }

    #[test]
    fn ema_fixed_point_is_squared_gradient() {
        let beta2: f64 = 0.9;
        let steps = (-12.0 / beta2.log10()).ceil() as u64 + 1; // beta2^t < 1e-12
        let g = ParamVector::ungrouped(vec![0.7, -2.0]);
        let mut s = adam(beta2, 0.0);
        let mut p = layout(2);
        for _ in 0..steps {
            s.step_in_place(&mut p, &g).unwrap();
        }
        for (v, g) in s.v.values().iter().zip(g.values()) {
            assert!((v - g * g).abs() <= 1e-12 * g * g, "{v} vs {}", g * g);
        }
    }

    #[test]
    fn bias_corrected_constant_gradient() {
        let g = ParamVector::ungrouped(vec![0.3, 4.0]);
        let mut s = adam(0.999, 0.0);
        let mut p = layout(2);
        for _ in 0..100 {
            s.step_in_place(&mut p, &g).unwrap();
        }
        let acc = s.accumulator(true).unwrap();
        for (a, g) in acc.values().iter().zip(g.values()) {
            assert!((a - g * g).abs() <= 1e-12 * g * g);
        }
        assert_eq!(p.values(), &[0.0, 0.0]);
    }

    #[test]
    fn one_step_accumulator() {
        let g = ParamVector::ungrouped(vec![2.0, 1.0]);
        let (s, _) = adam(0.999, 1e-3).step(&layout(2), &g).unwrap();
        let raw = s.accumulator(false).unwrap();
        assert!((raw.values()[0] - 0.004).abs() < 1e-15);
        let corrected = s.accumulator(true).unwrap();
        assert!((corrected.values()[0] - 4.0).abs() < 1e-12);
    }

    #[test]
    fn unavailable_accumulators() {
        let sgd = OptimizerState::new(OptimizerKind::Sgd, &layout(2), Hyperparams::default()).unwrap();
        assert!(matches!(sgd.accumulator(true), Err(Error::Unavailable(_))));
        assert!(matches!(adam(0.999, 0.1).accumulator(true), Err(Error::Unavailable(_))));
    }

    #[test]
    fn non_finite_gradient_leaves_state_untouched() {
        let mut s = adam(0.999, 0.1);
        let mut p = ParamVector::ungrouped(vec![1.0, 1.0]);
        let before = (s.clone(), p.clone());
        let bad = ParamVector::ungrouped(vec![1.0, f64::NAN]);
        assert!(matches!(s.step_in_place(&mut p, &bad), Err(Error::Numeric(_))));
        assert_eq!((s, p), before);
    }

    #[test]
    fn sgd_is_plain_gradient_descent() {
        let mut s = OptimizerState::new(
            OptimizerKind::Sgd,
            &layout(2),
            Hyperparams { lr: 0.5, ..Hyperparams::default() },
        )
        .unwrap();
        let mut p = ParamVector::ungrouped(vec![1.0, -1.0]);
        s.step_in_place(&mut p, &ParamVector::ungrouped(vec![0.5, 2.0])).unwrap();
        assert_eq!(p.values(), &[0.75, -2.0]);
        assert!(s.v.values().iter().all(|v| *v == 0.0));
        assert_eq!(s.t, 1);
    }

    #[test]
    fn adamw_decay_stays_out_of_accumulator() {
        let hyper = Hyperparams { lr: 0.1, weight_decay: 0.5, ..Hyperparams::default() };
        let g = ParamVector::ungrouped(vec![0.2, 0.2]);
        let p = ParamVector::ungrouped(vec![3.0, -3.0]);
        let w = OptimizerState::new(OptimizerKind::AdamW, &p, hyper).unwrap();
        let (w, _) = w.step(&p, &g).unwrap();
        assert!(w.v.values().iter().all(|v| (v - 0.001 * 0.04).abs() < 1e-18));
        let a = OptimizerState::new(OptimizerKind::Adam, &p, hyper).unwrap();
        let (a, _) = a.step(&p, &g).unwrap();
        assert!(a.v.values()[0] > w.v.values()[0]);
    }

    #[test]
    fn time_constant_of_default_beta2() {
        let tau = ema_time_constant(0.999);
        assert!((tau - 999.5).abs() < 0.01);
    }

    #[test]
    fn checkpoint_round_trip() {
        let spec = MlpSpec::new(vec![2, 3, 2], Activation::Relu, Head::SoftmaxXent).unwrap();
        let params = crate::nn::init_params(&spec, &mut crate::rng::stream(1, &[]));
        let mut state = OptimizerState::new(OptimizerKind::AdamW, &params, Hyperparams::default()).unwrap();
        let mut p = params.clone();
        let g = p.with_values((0..p.len()).map(|i| (i as f64).sin() / 7.0).collect()).unwrap();
        state.step_in_place(&mut p, &g).unwrap();
        let prov = Provenance {
            dataset_id: "toy".into(),
            dataset_size: 10,
            batch_size: 5,
            steps: 1,
            seed: 1,
            parents: vec![],
        };
        let ckpt = Checkpoint::new(spec, p, state, prov).unwrap();
        let back = Checkpoint::from_bytes(&ckpt.to_bytes().unwrap()).unwrap();
        assert_eq!(back, ckpt);
        let bytes = ckpt.to_bytes().unwrap();
        match Checkpoint::from_bytes(&bytes[..bytes.len() - 1]) {
            Err(Error::Format { field, .. }) => assert_eq!(field, "v"),
            other => panic!("{other:?}"),
        }
    }
}

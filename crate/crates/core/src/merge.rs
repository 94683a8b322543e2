//! Fisher-weighted merging, uncertainty-based gradient matching (UBGM) and
//! plain parameter averaging.

use crate::error::{Error, Result};
use crate::fisher::FisherDiagonal;
use crate::params::ParamVector;

/// Denominator stabilizer used unless the caller overrides it.
pub const DEFAULT_EPSILON: f64 = 1e-10;

#[derive(Debug, Clone)]
pub struct MergeInput {
    pub models: Vec<(ParamVector, FisherDiagonal)>,
    /// Base model and its Fisher (UBGM only).
    pub base: Option<(ParamVector, FisherDiagonal)>,
    /// `0.0` gives the exact, scale-invariant formulas.
    pub epsilon: f64,
}

impl MergeInput {
    pub fn new(models: Vec<(ParamVector, FisherDiagonal)>) -> Self {
        Self {
            models,
            base: None,
            epsilon: DEFAULT_EPSILON,
        }
    }

    pub fn with_base(mut self, params: ParamVector, fisher: FisherDiagonal) -> Self {
        self.base = Some((params, fisher));
        self
    }

    pub fn with_epsilon(mut self, epsilon: f64) -> Self {
        self.epsilon = epsilon;
        self
    }

    fn validate(&self, min_models: usize) -> Result<()> {
        if self.models.len() < min_models {
            return Err(Error::Input(format!(
                "need at least {min_models} models, got {}",
                self.models.len()
            )));
        }
        if !(self.epsilon >= 0.0 && self.epsilon.is_finite()) {
            return Err(Error::Input(format!("epsilon must be >= 0, got {}", self.epsilon)));
        }
        let (p0, f0) = &self.models[0];
        let all = self.models.iter().chain(self.base.iter());
        for (i, (p, f)) in all.enumerate() {
            p0.ensure_compatible(p, &format!("merge input {i}"))?;
            p0.ensure_compatible(&f.values, &format!("merge input {i} Fisher"))?;
            if f.scaling != f0.scaling {
                return Err(Error::Layout(format!(
                    "merge input {i} uses {:?} but input 0 uses {:?}",
                    f.scaling, f0.scaling
                )));
            }
        }
        Ok(())
    }
}

/// `theta_i = sum_m F_mi theta_mi / (sum_m F_mi + eps)`, falling back to the
/// unweighted mean where `sum_m F_mi` is below `eps` (or exactly zero when
/// `eps == 0`).
pub fn fisher_merge(inp: &MergeInput) -> Result<ParamVector> {
    inp.validate(2)?;
    let m = inp.models.len() as f64;
    let len = inp.models[0].0.len();
    let mut out = Vec::with_capacity(len);
    for i in 0..len {
        let mut weight = 0.0;
        let mut weighted = 0.0;
        let mut plain = 0.0;
        for (p, f) in &inp.models {
            let (t, w) = (p.values()[i], f.values()[i]);
            weight += w;
            weighted += w * t;
            plain += t;
        }
        let dead = if inp.epsilon > 0.0 { weight < inp.epsilon } else { weight == 0.0 };
        out.push(if dead {
            plain / m
        } else {
            weighted / (weight + inp.epsilon)
        });
    }
    inp.models[0].0.with_values(out)
}

/// `theta_0 + (F_0 + sum_i F_i + eps)^-1 sum_i (F_0 + F_i)(theta_i - theta_0)`.
/// Coordinates with no information fall back to the mean of the models.
pub fn ubgm_merge(inp: &MergeInput) -> Result<ParamVector> {
    let (base, base_f) = inp
        .base
        .as_ref()
        .ok_or_else(|| Error::Input("UBGM merging needs a base model".into()))?;
    inp.validate(1)?;
    let m = inp.models.len() as f64;
    let mut out = Vec::with_capacity(base.len());
    for i in 0..base.len() {
        let t0 = base.values()[i];
        let f0 = base_f.values()[i];
        let mut denom = f0;
        let mut mean = 0.0;
        for (p, f) in &inp.models {
            denom += f.values()[i];
            mean += p.values()[i];
        }
        let dead = if inp.epsilon > 0.0 { denom < inp.epsilon } else { denom == 0.0 };
        if dead {
            out.push(mean / m);
            continue;
        }
        // Per-model coefficients first, so a lone model with F_0 = 0 gets
        // exactly 1.
        let denom = denom + inp.epsilon;
        let mut step = 0.0;
        for (p, f) in &inp.models {
            step += (f0 + f.values()[i]) / denom * (p.values()[i] - t0);
        }
        out.push(t0 + step);
    }
    base.with_values(out)
}

/// Unweighted elementwise mean.
pub fn linear_merge(models: &[ParamVector]) -> Result<ParamVector> {
    if models.len() < 2 {
        return Err(Error::Input(format!(
            "need at least 2 models, got {}",
            models.len()
        )));
    }
    for (i, p) in models.iter().enumerate() {
        models[0].ensure_compatible(p, &format!("merge input {i}"))?;
    }
    let m = models.len() as f64;
    let out = (0..models[0].len())
        .map(|i| models.iter().map(|p| p.values()[i]).sum::<f64>() / m)
        .collect();
    models[0].with_values(out)
}

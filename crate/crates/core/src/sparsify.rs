//! Fisher pruning statistics, top-k / random masks, pruning and FISH-style
//! resets.

use rand::seq::index;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fisher::FisherDiagonal;
use crate::params::ParamVector;
use crate::rng::Rng;

/// Diagonal-Fisher loss-increase estimate `theta_i^2 F_i / 2`.
#[derive(Debug, Clone, PartialEq)]
pub struct PruningStatistics {
    pub rho: ParamVector,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Mask {
    keep: Vec<bool>,
    k: usize,
}

impl Mask {
    pub fn from_bits(keep: Vec<bool>) -> Self {
        let k = keep.iter().filter(|b| **b).count();
        Self { keep, k }
    }

    pub fn all(len: usize, value: bool) -> Self {
        Self::from_bits(vec![value; len])
    }

    pub fn keep(&self) -> &[bool] {
        &self.keep
    }

    pub fn k(&self) -> usize {
        self.k
    }

    pub fn len(&self) -> usize {
        self.keep.len()
    }

    pub fn is_empty(&self) -> bool {
        self.keep.is_empty()
    }

    /// JSON export: run-length encoded bits plus the parameter layout checksum.
    pub fn to_json(&self, layout: &ParamVector) -> Result<String> {
        if layout.len() != self.len() {
            return Err(Error::Layout("mask and layout differ in length".into()));
        }
        let mut runs: Vec<usize> = Vec::new();
        let mut current = false;
        let mut count = 0;
        for &b in &self.keep {
            if b == current {
                count += 1;
            } else {
                runs.push(count);
                current = b;
                count = 1;
            }
        }
        runs.push(count);
        let doc = MaskDocument {
            len: self.len(),
            k: self.k,
            layout_checksum: layout.layout_checksum(),
            first_value: false,
            runs,
        };
        serde_json::to_string_pretty(&doc).map_err(|e| Error::format("mask", e.to_string()))
    }

    /// Parses [`Mask::to_json`] output and checks it against `layout`.
    pub fn from_json(json: &str, layout: &ParamVector) -> Result<Self> {
        let doc: MaskDocument =
            serde_json::from_str(json).map_err(|e| Error::format("mask", e.to_string()))?;
        if doc.layout_checksum != layout.layout_checksum() {
            return Err(Error::format("layout_checksum", "mask was built for a different layout"));
        }
        let mut keep = Vec::with_capacity(doc.len);
        let mut value = doc.first_value;
        for r in &doc.runs {
            keep.extend(std::iter::repeat_n(value, *r));
            value = !value;
        }
        if keep.len() != doc.len {
            return Err(Error::format("runs", format!("runs cover {} bits, header says {}", keep.len(), doc.len)));
        }
        let mask = Mask::from_bits(keep);
        if mask.k != doc.k {
            return Err(Error::format("k", format!("popcount {} but header says {}", mask.k, doc.k)));
        }
        Ok(mask)
    }
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct MaskDocument {
    len: usize,
    k: usize,
    layout_checksum: String,
    first_value: bool,
    runs: Vec<usize>,
}

pub fn pruning_stats(params: &ParamVector, fisher: &FisherDiagonal) -> Result<PruningStatistics> {
    params.ensure_compatible(&fisher.values, "pruning statistics")?;
    let rho = params
        .values()
        .iter()
        .zip(fisher.values())
        .map(|(t, f)| t * t * f / 2.0)
        .collect();
    Ok(PruningStatistics {
        rho: params.with_values(rho)?,
    })
}

/// Keeps the `k` largest scores; ties go to the lower index.
pub fn top_k_mask(scores: &[f64], k: usize) -> Result<Mask> {
    if k > scores.len() {
        return Err(Error::Input(format!("k = {k} exceeds {} scores", scores.len())));
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
    let mut keep = vec![false; scores.len()];
    for &i in &order[..k] {
        keep[i] = true;
    }
    Ok(Mask { keep, k })
}

/// Uniformly random `k`-subset.
pub fn random_mask(len: usize, k: usize, rng: &mut Rng) -> Result<Mask> {
    if k > len {
        return Err(Error::Input(format!("k = {k} exceeds length {len}")));
    }
    let mut keep = vec![false; len];
    for i in index::sample(rng, len, k).into_iter() {
        keep[i] = true;
    }
    Ok(Mask { keep, k })
}

/// Number of parameters kept when a `fraction` of `len` is retained (floored).
pub fn kept_count(len: usize, keep_fraction: f64) -> Result<usize> {
    if !(0.0..=1.0).contains(&keep_fraction) {
        return Err(Error::Input(format!("fraction {keep_fraction} outside [0, 1]")));
    }
    Ok(((len as f64) * keep_fraction + 1e-9).floor() as usize)
}

fn check_mask(params: &ParamVector, mask: &Mask) -> Result<()> {
    if params.len() != mask.len() {
        return Err(Error::Layout(format!(
            "mask has {} bits, parameters have {} values",
            mask.len(),
            params.len()
        )));
    }
    Ok(())
}

/// Zeroes every coordinate the mask drops.
pub fn apply_prune(params: &ParamVector, mask: &Mask) -> Result<ParamVector> {
    check_mask(params, mask)?;
    let out = params
        .values()
        .iter()
        .zip(mask.keep())
        .map(|(v, k)| if *k { *v } else { 0.0 })
        .collect();
    params.with_values(out)
}

/// Kept coordinates take fine-tuned values, the rest are reset to pretrained.
pub fn apply_fish_reset(finetuned: &ParamVector, pretrained: &ParamVector, mask: &Mask) -> Result<ParamVector> {
    finetuned.ensure_compatible(pretrained, "FISH reset")?;
    check_mask(finetuned, mask)?;
    let out = finetuned
        .values()
        .iter()
        .zip(pretrained.values())
        .zip(mask.keep())
        .map(|((f, p), k)| if *k { *f } else { *p })
        .collect();
    finetuned.with_values(out)
}

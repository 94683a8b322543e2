use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

/// A named contiguous slice of the flat parameter vector.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ParamGroup {
    pub name: String,
    pub offset: usize,
    pub len: usize,
}

/// Flat parameter vector with a group table that partitions it exactly.
///
/// Gradients, Fisher diagonals, optimizer moments and masks all share this
/// coordinate system; two vectors are compatible iff their group tables are
/// identical.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParamVector {
    values: Vec<f64>,
    groups: Vec<ParamGroup>,
}

pub(crate) fn validate_groups(groups: &[ParamGroup], len: usize) -> Result<()> {
    let mut cursor = 0;
    for g in groups {
        if g.offset != cursor {
            return Err(Error::Layout(format!(
                "group `{}` starts at {} but previous coverage ends at {cursor}",
                g.name, g.offset
            )));
        }
        cursor += g.len;
    }
    if cursor != len {
        return Err(Error::Layout(format!(
            "groups cover {cursor} values but vector has {len}"
        )));
    }
    Ok(())
}

impl ParamVector {
    pub fn new(values: Vec<f64>, groups: Vec<ParamGroup>) -> Result<Self> {
        validate_groups(&groups, values.len())?;
        Ok(Self { values, groups })
    }

    /// A single group named `params` spanning the whole vector.
    pub fn ungrouped(values: Vec<f64>) -> Self {
        let len = values.len();
        Self {
            values,
            groups: vec![ParamGroup {
                name: "params".into(),
                offset: 0,
                len,
            }],
        }
    }

    pub fn zeros_like(other: &ParamVector) -> Self {
        Self {
            values: vec![0.0; other.len()],
            groups: other.groups.clone(),
        }
    }

    /// Same layout as `self`, new values.
    pub fn with_values(&self, values: Vec<f64>) -> Result<Self> {
        if values.len() != self.values.len() {
            return Err(Error::Layout(format!(
                "expected {} values, got {}",
                self.values.len(),
                values.len()
            )));
        }
        Ok(Self {
            values,
            groups: self.groups.clone(),
        })
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [f64] {
        &mut self.values
    }

    pub fn into_values(self) -> Vec<f64> {
        self.values
    }

    pub fn groups(&self) -> &[ParamGroup] {
        &self.groups
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn group(&self, name: &str) -> Option<&[f64]> {
        self.groups
            .iter()
            .find(|g| g.name == name)
            .map(|g| &self.values[g.offset..g.offset + g.len])
    }

    /// Splits into one owned vector per group, in group order.
    pub fn unflatten(&self) -> Vec<(String, Vec<f64>)> {
        self.groups
            .iter()
            .map(|g| {
                (
                    g.name.clone(),
                    self.values[g.offset..g.offset + g.len].to_vec(),
                )
            })
            .collect()
    }

    /// Inverse of [`ParamVector::unflatten`].
    pub fn flatten(parts: &[(String, Vec<f64>)]) -> Self {
        let mut values = Vec::new();
        let mut groups = Vec::with_capacity(parts.len());
        for (name, data) in parts {
            groups.push(ParamGroup {
                name: name.clone(),
                offset: values.len(),
                len: data.len(),
            });
            values.extend_from_slice(data);
        }
        Self { values, groups }
    }

    pub fn is_compatible(&self, other: &ParamVector) -> bool {
        self.groups == other.groups
    }

    pub fn ensure_compatible(&self, other: &ParamVector, what: &str) -> Result<()> {
        ensure_same_layout(&self.groups, &other.groups, what)
    }

    /// Hex SHA-256 over the group table; identifies a layout in exported files.
    pub fn layout_checksum(&self) -> String {
        layout_checksum(&self.groups)
    }

    /// Hex SHA-256 over group table and the exact bit patterns of the values.
    pub fn checksum(&self) -> String {
        let mut h = Sha256::new();
        h.update(layout_checksum(&self.groups).as_bytes());
        for v in &self.values {
            h.update(v.to_le_bytes());
        }
        hex::encode(h.finalize())
    }
}

pub(crate) fn ensure_same_layout(a: &[ParamGroup], b: &[ParamGroup], what: &str) -> Result<()> {
    if a == b {
        Ok(())
    } else {
        let total = |g: &[ParamGroup]| g.iter().map(|x| x.len).sum::<usize>();
        Err(Error::Layout(format!(
            "{what}: group tables differ ({} groups / {} values vs {} groups / {} values)",
            a.len(),
            total(a),
            b.len(),
            total(b)
        )))
    }
}

pub fn layout_checksum(groups: &[ParamGroup]) -> String {
    let mut h = Sha256::new();
    for g in groups {
        h.update((g.name.len() as u64).to_le_bytes());
        h.update(g.name.as_bytes());
        h.update((g.offset as u64).to_le_bytes());
        h.update((g.len as u64).to_le_bytes());
    }
    hex::encode(h.finalize())
}

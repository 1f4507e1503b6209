use std::collections::BTreeMap;
use std::ops::Range;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Which tensor of a layer a parameter is. Batchnorm stores its scale as
/// `Weight` and its shift as `Bias`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Role {
    Weight,
    Bias,
}

impl Role {
    pub fn as_str(self) -> &'static str {
        match self {
            Role::Weight => "weight",
            Role::Bias => "bias",
        }
    }
}

/// Addresses a parameter tensor by absolute backbone layer index.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct ParamKey {
    pub layer: usize,
    pub role: Role,
}

impl ParamKey {
    pub fn new(layer: usize, role: Role) -> Self {
        ParamKey { layer, role }
    }

    pub fn weight(layer: usize) -> Self {
        Self::new(layer, Role::Weight)
    }

    pub fn bias(layer: usize) -> Self {
        Self::new(layer, Role::Bias)
    }
}

impl std::fmt::Display for ParamKey {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{}.{}", self.layer, self.role.as_str())
    }
}

/// Ordered set of named parameter tensors. Also used for gradients and for
/// expanded element masks, which share the exact same structure.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParameterTree {
    entries: BTreeMap<ParamKey, Tensor>,
}

impl ParameterTree {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, key: ParamKey, tensor: Tensor) -> Option<Tensor> {
        self.entries.insert(key, tensor)
    }

    pub fn get(&self, key: &ParamKey) -> Option<&Tensor> {
        self.entries.get(key)
    }

    pub fn get_mut(&mut self, key: &ParamKey) -> Option<&mut Tensor> {
        self.entries.get_mut(key)
    }

    pub fn require(&self, key: &ParamKey) -> Result<&Tensor> {
        self.entries
            .get(key)
            .ok_or_else(|| Error::Config(format!("missing parameter {key}")))
    }

    pub fn contains(&self, key: &ParamKey) -> bool {
        self.entries.contains_key(key)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&ParamKey, &Tensor)> {
        self.entries.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&ParamKey, &mut Tensor)> {
        self.entries.iter_mut()
    }

    pub fn keys(&self) -> impl Iterator<Item = &ParamKey> {
        self.entries.keys()
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Total scalar count over all tensors.
    pub fn num_values(&self) -> usize {
        self.entries.values().map(Tensor::len).sum()
    }

    pub fn count_nonzero(&self) -> usize {
        self.entries.values().map(Tensor::count_nonzero).sum()
    }

    pub fn zeros_like(&self) -> Self {
        self.map(|_| 0.0)
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Self {
        ParameterTree {
            entries: self.entries.iter().map(|(k, t)| (*k, t.map(&f))).collect(),
        }
    }

    /// Sub-tree holding only the layers in `range`.
    pub fn restrict(&self, range: Range<usize>) -> Self {
        ParameterTree {
            entries: self
                .entries
                .iter()
                .filter(|(k, _)| range.contains(&k.layer))
                .map(|(k, t)| (*k, t.clone()))
                .collect(),
        }
    }

    /// Same keys and same tensor shapes.
    pub fn same_structure(&self, other: &ParameterTree) -> bool {
        self.entries.len() == other.entries.len()
            && self
                .entries
                .iter()
                .zip(&other.entries)
                .all(|((ka, ta), (kb, tb))| ka == kb && ta.same_shape(tb))
    }

    pub fn ensure_same_structure(&self, other: &ParameterTree) -> Result<()> {
        if self.same_structure(other) {
            return Ok(());
        }
        for (key, tensor) in &self.entries {
            match other.entries.get(key) {
                None => {
                    return Err(Error::Usage(format!(
                        "parameter {key} missing from other tree"
                    )))
                }
                Some(t) if !t.same_shape(tensor) => {
                    return Err(Error::Usage(format!(
                        "parameter {key} has shape {:?} vs {:?}",
                        tensor.shape(),
                        t.shape()
                    )))
                }
                _ => {}
            }
        }
        Err(Error::Usage("parameter trees have different keys".into()))
    }

    pub fn zip_map(&self, other: &ParameterTree, f: impl Fn(f64, f64) -> f64) -> Result<Self> {
        self.ensure_same_structure(other)?;
        let mut entries = BTreeMap::new();
        for ((key, a), b) in self.entries.iter().zip(other.entries.values()) {
            entries.insert(*key, a.zip_map(b, &f)?);
        }
        Ok(ParameterTree { entries })
    }

    /// Bitwise equality of every value.
    pub fn bit_eq(&self, other: &ParameterTree) -> bool {
        self.entries.len() == other.entries.len()
            && self
                .entries
                .iter()
                .zip(&other.entries)
                .all(|((ka, ta), (kb, tb))| ka == kb && ta.bit_eq(tb))
    }

    pub fn is_finite(&self) -> bool {
        self.entries.values().all(Tensor::is_finite)
    }

    /// SHA-256 over keys, shapes and the raw bits of every value.
    pub fn digest(&self) -> [u8; 32] {
        let mut hasher = Sha256::new();
        for (key, tensor) in &self.entries {
            hasher.update((key.layer as u64).to_le_bytes());
            hasher.update([key.role as u8]);
            for &d in tensor.shape() {
                hasher.update((d as u64).to_le_bytes());
            }
            for v in tensor.data() {
                hasher.update(v.to_bits().to_le_bytes());
            }
        }
        hasher.finalize().into()
    }
}

impl FromIterator<(ParamKey, Tensor)> for ParameterTree {
    fn from_iter<I: IntoIterator<Item = (ParamKey, Tensor)>>(iter: I) -> Self {
        ParameterTree {
            entries: iter.into_iter().collect(),
        }
    }
}

use std::collections::BTreeMap;

use crate::error::{Result, TensorError};
use crate::tensor::Tensor;

/// Named tensor collection with deterministic (sorted) iteration order.
///
/// Used for trainable parameters, normalization running statistics and
/// optimizer moments alike; what a set means is up to the owner.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamSet {
    map: BTreeMap<String, Tensor>,
}

impl ParamSet {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, tensor: Tensor) {
        self.map.insert(name.into(), tensor);
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.map.get(name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.map.get_mut(name)
    }

    /// Like [`ParamSet::get`] but failing with the parameter name.
    pub fn require(&self, name: &str) -> Result<&Tensor> {
        self.map.get(name).ok_or_else(|| TensorError::InvalidArg {
            op: "ParamSet::require",
            detail: format!("missing parameter {name:?}"),
        })
    }

    pub fn require_mut(&mut self, name: &str) -> Result<&mut Tensor> {
        self.map.get_mut(name).ok_or_else(|| TensorError::InvalidArg {
            op: "ParamSet::require",
            detail: format!("missing parameter {name:?}"),
        })
    }

    pub fn len(&self) -> usize {
        self.map.len()
    }

    pub fn is_empty(&self) -> bool {
        self.map.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Tensor)> {
        self.map.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&String, &mut Tensor)> {
        self.map.iter_mut()
    }

    pub fn names(&self) -> impl Iterator<Item = &String> {
        self.map.keys()
    }

    /// Total number of stored elements across all tensors.
    pub fn total_elems(&self) -> usize {
        self.map.values().map(Tensor::numel).sum()
    }

    /// Copy every entry into `target` under `prefix` + name.
    pub fn export_prefixed(&self, prefix: &str, target: &mut Vec<(String, Tensor)>) {
        for (name, tensor) in &self.map {
            target.push((format!("{prefix}{name}"), tensor.clone()));
        }
    }

    /// Collect entries of `source` that start with `prefix`, stripping it.
    pub fn import_prefixed(source: &[(String, Tensor)], prefix: &str) -> Self {
        let mut set = ParamSet::new();
        for (name, tensor) in source {
            if let Some(stripped) = name.strip_prefix(prefix) {
                set.insert(stripped, tensor.clone());
            }
        }
        set
    }

    /// True when both sets hold the same names with the same shapes.
    pub fn shape_congruent(&self, other: &ParamSet) -> bool {
        self.map.len() == other.map.len()
            && self
                .map
                .iter()
                .zip(other.map.iter())
                .all(|((na, ta), (nb, tb))| na == nb && ta.shape() == tb.shape())
    }
}

impl FromIterator<(String, Tensor)> for ParamSet {
    fn from_iter<I: IntoIterator<Item = (String, Tensor)>>(iter: I) -> Self {
        ParamSet { map: iter.into_iter().collect() }
    }
}

//! Named parameter and gradient collections.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{bail, Result};
use crate::tensor::Tensor;

/// Learnable tensors addressed by stable names. Iteration order is the
/// lexicographic order of the names, which is also the checkpoint order.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamSet {
    tensors: BTreeMap<String, Tensor>,
}

impl ParamSet {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, value: Tensor) {
        self.tensors.insert(name.into(), value);
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.tensors.get(name)
    }

    pub fn require(&self, name: &str) -> Result<&Tensor> {
        match self.tensors.get(name) {
            Some(t) => Ok(t),
            None => bail!(Contract, "no parameter named {name:?}"),
        }
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Tensor)> {
        self.tensors.iter()
    }

    pub fn names(&self) -> impl Iterator<Item = &String> {
        self.tensors.keys()
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    /// Total number of scalars.
    pub fn numel(&self) -> usize {
        self.tensors.values().map(Tensor::numel).sum()
    }

    pub fn is_finite(&self) -> bool {
        self.tensors.values().all(Tensor::is_finite)
    }

    /// Copy with every name prefixed, used to keep several models in one
    /// checkpoint without collisions.
    pub fn prefixed(&self, prefix: &str) -> ParamSet {
        let tensors = self.tensors.iter().map(|(k, v)| (format!("{prefix}{k}"), v.clone())).collect();
        ParamSet { tensors }
    }

    /// The subset whose names start with `prefix`, with the prefix removed.
    pub fn strip_prefix(&self, prefix: &str) -> ParamSet {
        let tensors = self
            .tensors
            .iter()
            .filter_map(|(k, v)| k.strip_prefix(prefix).map(|s| (s.to_string(), v.clone())))
            .collect();
        ParamSet { tensors }
    }

    pub fn extend(&mut self, other: ParamSet) {
        self.tensors.extend(other.tensors);
    }

    /// Replaces the value of an existing parameter, keeping its shape.
    pub fn set(&mut self, name: &str, value: Tensor) -> Result<()> {
        let Some(slot) = self.tensors.get_mut(name) else {
            bail!(Contract, "no parameter named {name:?}");
        };
        if slot.shape() != value.shape() {
            bail!(Dimension, "parameter {name:?} has shape {:?}, got {:?}", slot.shape(), value.shape());
        }
        *slot = value;
        Ok(())
    }

    /// Returns a copy where scalar `index` (in iteration order) of `name`
    /// is shifted by `delta`.
    pub fn perturbed(&self, name: &str, index: usize, delta: f64) -> ParamSet {
        let mut out = self.clone();
        let t = out.tensors.get_mut(name).expect("perturbing unknown parameter");
        let mut data = t.clone().into_data();
        data[index] += delta;
        *t = Tensor::new(t.shape().to_vec(), data).expect("same shape");
        out
    }
}

/// Gradient tensors keyed by parameter name.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Gradients {
    tensors: BTreeMap<String, Tensor>,
}

impl Gradients {
    pub fn zeros_like(params: &ParamSet) -> Self {
        let tensors = params.iter().map(|(k, v)| (k.clone(), Tensor::zeros(v.shape().to_vec()))).collect();
        Self { tensors }
    }

    pub(crate) fn from_map(tensors: BTreeMap<String, Tensor>) -> Self {
        Self { tensors }
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.tensors.get(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Tensor)> {
        self.tensors.iter()
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn is_finite(&self) -> bool {
        self.tensors.values().all(Tensor::is_finite)
    }

    pub fn scale(&self, k: f64) -> Self {
        Self { tensors: self.tensors.iter().map(|(n, t)| (n.clone(), t.scale(k))).collect() }
    }

    /// Sum of several gradient sets, added left to right so the result does
    /// not depend on how the parts were computed.
    pub fn sum_ordered(parts: &[Gradients]) -> Result<Self> {
        let Some(first) = parts.first() else {
            bail!(Contract, "sum of zero gradient sets");
        };
        let mut acc = first.clone();
        for p in &parts[1..] {
            for (name, t) in acc.tensors.iter_mut() {
                let Some(other) = p.tensors.get(name) else {
                    bail!(Contract, "gradient sets disagree on {name:?}");
                };
                *t = t.add(other)?;
            }
        }
        Ok(acc)
    }

    pub fn max_abs(&self) -> f64 {
        self.tensors.values().flat_map(|t| t.data().iter()).fold(0.0, |m, v| m.max(v.abs()))
    }
}

/// Shape-only description of a parameter, used in checkpoint headers.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub offset: usize,
}

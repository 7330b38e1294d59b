use std::collections::BTreeMap;

use sha2::{Digest, Sha256};

use crate::tensor::{Feed, Gradients, Tensor};

/// Named parameter tensors in a stable (sorted) order.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParamSet {
    tensors: BTreeMap<String, Tensor>,
}

impl ParamSet {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, t: Tensor) {
        self.tensors.insert(name.into(), t);
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.tensors.get(name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.tensors.get_mut(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.tensors.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&str, &mut Tensor)> {
        self.tensors.iter_mut().map(|(k, v)| (k.as_str(), v))
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.tensors.keys().map(String::as_str)
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    /// Total number of scalars.
    pub fn numel(&self) -> usize {
        self.tensors.values().map(Tensor::len).sum()
    }

    pub fn set_requires_grad(&mut self, on: bool) {
        for t in self.tensors.values_mut() {
            t.set_requires_grad(on);
        }
    }

    /// Same names and shapes.
    pub fn same_structure(&self, other: &ParamSet) -> bool {
        self.tensors.len() == other.tensors.len()
            && self
                .tensors
                .iter()
                .zip(&other.tensors)
                .all(|((ka, a), (kb, b))| ka == kb && a.shape() == b.shape())
    }

    /// SHA-256 over names, shapes and exact value bits.
    pub fn checksum(&self) -> String {
        let mut h = Sha256::new();
        for (k, t) in &self.tensors {
            h.update(k.as_bytes());
            for d in t.shape() {
                h.update((*d as u64).to_le_bytes());
            }
            for v in t.data() {
                h.update(v.to_bits().to_le_bytes());
            }
        }
        h.finalize().iter().map(|b| format!("{b:02x}")).collect()
    }

    /// Binds every tensor into `feed` under its own name.
    pub fn extend_feed<'a>(&'a self, feed: &mut Feed<'a>) {
        for (k, v) in &self.tensors {
            feed.insert(k.as_str(), v);
        }
    }

    /// Writes gradients for names in this set into the tensors' accumulators.
    pub fn accumulate(&mut self, grads: &Gradients) {
        for (k, g) in grads {
            if let Some(t) = self.tensors.get_mut(k) {
                t.accumulate_grad(g.data());
            }
        }
    }

    pub fn zero_grad(&mut self) {
        for t in self.tensors.values_mut() {
            t.zero_grad();
        }
    }

    /// L2 norm over the given gradients.
    pub fn grad_norm(grads: &Gradients) -> f64 {
        grads
            .values()
            .flat_map(|g| g.data().iter())
            .map(|v| v * v)
            .sum::<f64>()
            .sqrt()
    }
}

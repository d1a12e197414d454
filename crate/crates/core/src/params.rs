//! Named parameter storage shared by all trainable networks of a model.
//!
//! Parameter names are dotted paths (`synthesis.f1.enc0.conv_a.weight`), so a
//! whole sub-network is addressed by its name prefix when freezing, hashing or
//! selecting what an optimizer may update.

use std::collections::HashMap;

use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub(crate) usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Debug, Default)]
pub struct ParamStore<T> {
    names: Vec<String>,
    values: Vec<Tensor<T>>,
    index: HashMap<String, usize>,
}

impl<T: Scalar> ParamStore<T> {
    pub fn new() -> Self {
        Self {
            names: Vec::new(),
            values: Vec::new(),
            index: HashMap::new(),
        }
    }

    pub fn insert(&mut self, name: impl Into<String>, value: Tensor<T>) -> Result<ParamId> {
        let name = name.into();
        if self.index.contains_key(&name) {
            return Err(Error::InvalidConfig(format!("duplicate parameter name {name}")));
        }
        let id = self.values.len();
        self.index.insert(name.clone(), id);
        self.names.push(name);
        self.values.push(value);
        Ok(ParamId(id))
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Tensor<T> {
        &self.values[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor<T> {
        &mut self.values[id.0]
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.index.get(name).map(|&i| ParamId(i))
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> + '_ {
        (0..self.values.len()).map(ParamId)
    }

    pub fn ids_with_prefix<'a>(&'a self, prefix: &'a str) -> impl Iterator<Item = ParamId> + 'a {
        self.ids().filter(move |&id| name_has_prefix(self.name(id), prefix))
    }

    /// Total scalar count of all parameters under `prefix` (empty prefix = all).
    pub fn count(&self, prefix: &str) -> usize {
        self.ids_with_prefix(prefix).map(|id| self.get(id).len()).sum()
    }

    /// SHA-256 over names and raw value bits of every parameter under `prefix`.
    pub fn hash_prefix(&self, prefix: &str) -> String {
        let mut h = Sha256::new();
        for id in self.ids_with_prefix(prefix) {
            h.update(self.name(id).as_bytes());
            for &v in self.get(id).data() {
                h.update(v.as_f64().to_bits().to_le_bytes());
            }
        }
        h.finalize().iter().map(|b| format!("{b:02x}")).collect()
    }

    pub fn mask_for(&self, prefixes: &[&str]) -> ParamMask {
        ParamMask(
            self.names
                .iter()
                .map(|n| prefixes.iter().any(|p| name_has_prefix(n, p)))
                .collect(),
        )
    }
}

fn name_has_prefix(name: &str, prefix: &str) -> bool {
    prefix.is_empty()
        || name == prefix
        || (name.starts_with(prefix) && name.as_bytes().get(prefix.len()) == Some(&b'.'))
}

/// Which parameters receive gradients in a forward pass.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ParamMask(pub Vec<bool>);

impl ParamMask {
    pub fn all(n: usize) -> Self {
        Self(vec![true; n])
    }

    pub fn none(n: usize) -> Self {
        Self(vec![false; n])
    }

    #[inline]
    pub fn contains(&self, id: ParamId) -> bool {
        self.0.get(id.0).copied().unwrap_or(false)
    }
}

/// Accumulated gradients, one optional tensor per parameter.
#[derive(Clone, Debug)]
pub struct ParamGrads<T> {
    grads: Vec<Option<Tensor<T>>>,
}

impl<T: Scalar> ParamGrads<T> {
    pub fn new(n: usize) -> Self {
        Self { grads: vec![None; n] }
    }

    pub fn accumulate(&mut self, id: ParamId, g: &Tensor<T>) {
        match &mut self.grads[id.0] {
            Some(acc) => acc.axpy(T::one(), g),
            slot @ None => *slot = Some(g.clone()),
        }
    }

    pub fn get(&self, id: ParamId) -> Option<&Tensor<T>> {
        self.grads[id.0].as_ref()
    }

    pub fn scale(&mut self, s: T) {
        for g in self.grads.iter_mut().flatten() {
            for v in g.data_mut() {
                *v *= s;
            }
        }
    }

    pub fn global_norm(&self) -> T {
        self.grads
            .iter()
            .flatten()
            .map(|g| g.sum_sq())
            .sum::<T>()
            .sqrt()
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Tensor<T>)> {
        self.grads
            .iter()
            .enumerate()
            .filter_map(|(i, g)| g.as_ref().map(|g| (ParamId(i), g)))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn prefix_matching_respects_path_segments() {
        let mut s = ParamStore::<f32>::new();
        s.insert("warp.g1.w", Tensor::zeros(&[2])).unwrap();
        s.insert("warp.g10.w", Tensor::zeros(&[3])).unwrap();
        s.insert("syn.f1.w", Tensor::zeros(&[4])).unwrap();
        assert_eq!(s.count("warp.g1"), 2);
        assert_eq!(s.count("warp"), 5);
        assert_eq!(s.count(""), 9);
        let m = s.mask_for(&["syn"]);
        assert_eq!(m.0, vec![false, false, true]);
    }

    #[test]
    fn duplicate_names_are_rejected() {
        let mut s = ParamStore::<f64>::new();
        s.insert("a", Tensor::zeros(&[1])).unwrap();
        assert!(s.insert("a", Tensor::zeros(&[1])).is_err());
    }

    #[test]
    fn hash_changes_only_with_selected_values() {
        let mut s = ParamStore::<f32>::new();
        let a = s.insert("a.w", Tensor::zeros(&[2])).unwrap();
        s.insert("b.w", Tensor::zeros(&[2])).unwrap();
        let (ha, hb) = (s.hash_prefix("a"), s.hash_prefix("b"));
        s.get_mut(a).data_mut()[0] = 1.0;
        assert_ne!(ha, s.hash_prefix("a"));
        assert_eq!(hb, s.hash_prefix("b"));
    }
}

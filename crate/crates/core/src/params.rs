//! Named parameter storage shared by every module.
//!
//! Names are dotted paths (`projector.film.0.weight`); the top-level segment
//! is the checkpoint namespace.

use alloc::collections::BTreeMap;
use alloc::string::{String, ToString};
use alloc::vec::Vec;

use crate::tensor::Tensor;

#[derive(Clone, Debug, Default, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct ParamStore {
    tensors: BTreeMap<String, Tensor>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, tensor: Tensor) {
        self.tensors.insert(name.into(), tensor);
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.tensors.get(name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.tensors.get_mut(name)
    }

    pub fn contains(&self, name: &str) -> bool {
        self.tensors.contains_key(name)
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

    /// Total scalar count.
    pub fn numel(&self) -> usize {
        self.tensors.values().map(Tensor::numel).sum()
    }

    pub fn with_prefix<'a>(&'a self, prefix: &'a str) -> impl Iterator<Item = (&'a String, &'a Tensor)> {
        self.tensors
            .iter()
            .filter(move |(k, _)| k.starts_with(prefix))
    }

    pub fn numel_with_prefix(&self, prefix: &str) -> usize {
        self.with_prefix(prefix).map(|(_, t)| t.numel()).sum()
    }

    /// Copy every tensor under `prefix` from `other`, replacing existing ones.
    pub fn copy_prefix_from(&mut self, other: &ParamStore, prefix: &str) {
        for (k, v) in other.with_prefix(prefix) {
            self.tensors.insert(k.clone(), v.clone());
        }
    }

    pub fn retain(&mut self, mut keep: impl FnMut(&str) -> bool) {
        self.tensors.retain(|k, _| keep(k));
    }

    pub fn all_finite(&self) -> bool {
        self.tensors.values().all(Tensor::is_finite)
    }

    /// Names whose tensors differ in shape or in any bit.
    pub fn diff(&self, other: &ParamStore) -> Vec<String> {
        let mut out = Vec::new();
        for (k, v) in &self.tensors {
            match other.get(k) {
                Some(o) if o.shape() == v.shape() && o.bits() == v.bits() => {}
                _ => out.push(k.clone()),
            }
        }
        for k in other.names() {
            if !self.contains(k) {
                out.push(k.to_string());
            }
        }
        out
    }
}

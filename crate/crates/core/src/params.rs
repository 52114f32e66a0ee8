//! Named tensor store shared by every model in the crate.
//!
//! Names are `/`-separated paths. The first component is the namespace
//! (`encoder`, `base`, `gen`, `backbone`, `controlnet`, ...). Frozen tensors
//! never receive gradients and are refused by the optimizer.

use std::collections::BTreeMap;
use std::sync::Arc;

use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Clone, Debug)]
pub struct Param {
    pub value: Arc<Tensor>,
    pub frozen: bool,
}

#[derive(Clone, Debug, Default)]
pub struct ParamStore {
    entries: BTreeMap<String, Param>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, value: Tensor, frozen: bool) {
        self.entries.insert(name.into(), Param { value: Arc::new(value), frozen });
    }

    pub fn contains(&self, name: &str) -> bool {
        self.entries.contains_key(name)
    }

    pub fn get(&self, name: &str) -> Result<&Tensor> {
        self.entries
            .get(name)
            .map(|p| p.value.as_ref())
            .ok_or_else(|| Error::MissingParam(name.to_string()))
    }

    pub fn param(&self, name: &str) -> Result<&Param> {
        self.entries.get(name).ok_or_else(|| Error::MissingParam(name.to_string()))
    }

    pub fn is_frozen(&self, name: &str) -> Result<bool> {
        Ok(self.param(name)?.frozen)
    }

    /// Mutable access that ignores the frozen flag. Used only when
    /// initializing parameters; optimizers go through [`crate::train::Adam`].
    pub(crate) fn tensor_mut(&mut self, name: &str) -> Result<&mut Tensor> {
        self.entries
            .get_mut(name)
            .map(|p| Arc::make_mut(&mut p.value))
            .ok_or_else(|| Error::MissingParam(name.to_string()))
    }

    pub fn set_frozen_prefix(&mut self, prefix: &str, frozen: bool) {
        for (name, p) in self.entries.iter_mut() {
            if name.starts_with(prefix) {
                p.frozen = frozen;
            }
        }
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Param)> {
        self.entries.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn names_with_prefix<'a>(&'a self, prefix: &'a str) -> impl Iterator<Item = &'a str> + 'a {
        self.entries
            .range(prefix.to_string()..)
            .take_while(move |(k, _)| k.starts_with(prefix))
            .map(|(k, _)| k.as_str())
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Copies every entry of `other` into `self`, replacing same-named ones.
    pub fn merge(&mut self, other: &ParamStore) {
        for (k, v) in &other.entries {
            self.entries.insert(k.clone(), v.clone());
        }
    }

    /// Keeps only entries under `prefix`.
    pub fn subset(&self, prefix: &str) -> ParamStore {
        let entries = self
            .entries
            .iter()
            .filter(|(k, _)| k.starts_with(prefix))
            .map(|(k, v)| (k.clone(), v.clone()))
            .collect();
        ParamStore { entries }
    }

    pub fn remove_prefix(&mut self, prefix: &str) {
        self.entries.retain(|k, _| !k.starts_with(prefix));
    }

    pub fn count_values(&self, prefix: &str) -> usize {
        self.entries
            .iter()
            .filter(|(k, _)| k.starts_with(prefix))
            .map(|(_, p)| p.value.len())
            .sum()
    }

    /// SHA-256 over names, shapes and raw value bits of all entries under `prefix`.
    pub fn checksum(&self, prefix: &str) -> String {
        let mut h = Sha256::new();
        for (name, p) in self.entries.iter().filter(|(k, _)| k.starts_with(prefix)) {
            h.update(name.as_bytes());
            h.update((p.value.rows() as u64).to_le_bytes());
            h.update((p.value.cols() as u64).to_le_bytes());
            for v in p.value.data() {
                h.update(v.to_bits().to_le_bytes());
            }
        }
        hex(&h.finalize())
    }
}

pub(crate) fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

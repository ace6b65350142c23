//! Named parameter storage.
//!
//! Tensors are addressed by hierarchical dotted names (`blocks.2.self_attn.q.weight`)
//! and held behind `Arc`, so cloning a store shares storage until one side
//! writes (copy-on-write through [`ParamStore::value_mut`]).

use std::collections::BTreeMap;
use std::sync::Arc;

use sha2::{Digest, Sha256};

use crate::error::{LynxError, Result};
use crate::tensor::Matrix;

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct ParamId(pub(crate) usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Debug)]
struct Entry {
    name: String,
    value: Arc<Matrix>,
    trainable: bool,
}

#[derive(Clone, Debug, Default)]
pub struct ParamStore {
    entries: Vec<Entry>,
    index: BTreeMap<String, ParamId>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, value: Matrix, trainable: bool) -> Result<ParamId> {
        let name = name.into();
        if self.index.contains_key(&name) {
            return Err(LynxError::invalid(format!("duplicate parameter name {name}")));
        }
        let id = ParamId(self.entries.len());
        self.index.insert(name.clone(), id);
        self.entries.push(Entry {
            name,
            value: Arc::new(value),
            trainable,
        });
        Ok(id)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.index.get(name).copied()
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.entries[id.0].name
    }

    pub fn value(&self, id: ParamId) -> &Matrix {
        &self.entries[id.0].value
    }

    pub(crate) fn shared(&self, id: ParamId) -> Arc<Matrix> {
        Arc::clone(&self.entries[id.0].value)
    }

    /// Mutable access; detaches from any store sharing this tensor.
    pub fn value_mut(&mut self, id: ParamId) -> &mut Matrix {
        Arc::make_mut(&mut self.entries[id.0].value)
    }

    pub fn set(&mut self, id: ParamId, value: Matrix) -> Result<()> {
        let cur = self.value(id);
        if cur.shape() != value.shape() {
            return Err(LynxError::dims(format!(
                "parameter {} has shape {:?}, got {:?}",
                self.name(id),
                cur.shape(),
                value.shape()
            )));
        }
        self.entries[id.0].value = Arc::new(value);
        Ok(())
    }

    pub fn is_trainable(&self, id: ParamId) -> bool {
        self.entries[id.0].trainable
    }

    pub fn set_trainable(&mut self, id: ParamId, trainable: bool) {
        self.entries[id.0].trainable = trainable;
    }

    /// Sets the trainable flag of every parameter whose name starts with `prefix`.
    pub fn set_trainable_prefix(&mut self, prefix: &str, trainable: bool) -> usize {
        let mut n = 0;
        for e in self.entries.iter_mut().filter(|e| e.name.starts_with(prefix)) {
            e.trainable = trainable;
            n += 1;
        }
        n
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> + '_ {
        (0..self.entries.len()).map(ParamId)
    }

    pub fn trainable_ids(&self) -> impl Iterator<Item = ParamId> + '_ {
        self.ids().filter(|&id| self.is_trainable(id))
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &str, &Matrix)> + '_ {
        self.entries
            .iter()
            .enumerate()
            .map(|(i, e)| (ParamId(i), e.name.as_str(), &*e.value))
    }

    pub fn num_scalars(&self) -> usize {
        self.entries.iter().map(|e| e.value.len()).sum()
    }

    /// True when both stores hold the very same allocation for `id`.
    pub fn shares_storage(&self, other: &ParamStore, id: ParamId) -> bool {
        match (self.entries.get(id.0), other.entries.get(id.0)) {
            (Some(a), Some(b)) => Arc::ptr_eq(&a.value, &b.value),
            _ => false,
        }
    }

    /// SHA-256 over names, shapes and little-endian values of the selected
    /// parameters, in name order.
    pub fn content_hash(&self, filter: impl Fn(&str) -> bool) -> String {
        let mut h = Sha256::new();
        for (name, id) in &self.index {
            if !filter(name) {
                continue;
            }
            let v = self.value(*id);
            h.update((name.len() as u64).to_le_bytes());
            h.update(name.as_bytes());
            h.update((v.rows() as u64).to_le_bytes());
            h.update((v.cols() as u64).to_le_bytes());
            for x in v.data() {
                h.update(x.to_le_bytes());
            }
        }
        hex::encode(h.finalize())
    }
}

//! Named parameter storage shared by every module.

use std::collections::HashMap;

use rand::Rng;
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub(crate) usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone)]
struct Entry<T> {
    name: String,
    value: Tensor<T>,
    frozen: bool,
}

/// Flat list of learnable tensors addressed by id or by dotted module path.
#[derive(Debug, Clone, Default)]
pub struct ParamStore<T> {
    entries: Vec<Entry<T>>,
    index: HashMap<String, usize>,
}

impl<T: Scalar> ParamStore<T> {
    pub fn new() -> Self {
        Self { entries: Vec::new(), index: HashMap::new() }
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor<T>) -> ParamId {
        let name = name.into();
        assert!(!self.index.contains_key(&name), "duplicate parameter {name}");
        let id = self.entries.len();
        self.index.insert(name.clone(), id);
        self.entries.push(Entry { name, value, frozen: false });
        ParamId(id)
    }

    /// Uniform init in `±sqrt(1/fan_in)`.
    pub fn add_uniform<R: Rng + ?Sized>(
        &mut self,
        name: impl Into<String>,
        shape: &[usize],
        fan_in: usize,
        rng: &mut R,
    ) -> ParamId {
        let bound = (1.0 / fan_in.max(1) as f64).sqrt();
        self.add(name, Tensor::uniform(shape, bound, rng))
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn num_scalars(&self) -> usize {
        self.entries.iter().map(|e| e.value.numel()).sum()
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.entries.len()).map(ParamId)
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.entries[id.0].name
    }

    pub fn get(&self, id: ParamId) -> &Tensor<T> {
        &self.entries[id.0].value
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor<T> {
        &mut self.entries[id.0].value
    }

    pub fn set(&mut self, id: ParamId, value: Tensor<T>) -> Result<()> {
        let slot = &mut self.entries[id.0];
        if slot.value.shape() != value.shape() {
            return Err(Error::shape(
                "ParamStore::set",
                format!("{}: {:?} vs {:?}", slot.name, slot.value.shape(), value.shape()),
            ));
        }
        slot.value = value;
        Ok(())
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.index.get(name).copied().map(ParamId)
    }

    pub fn is_frozen(&self, id: ParamId) -> bool {
        self.entries[id.0].frozen
    }

    /// Freeze or unfreeze every parameter whose path starts with `prefix`.
    pub fn set_frozen_prefix(&mut self, prefix: &str, frozen: bool) -> usize {
        let mut n = 0;
        for e in self.entries.iter_mut().filter(|e| e.name.starts_with(prefix)) {
            e.frozen = frozen;
            n += 1;
        }
        n
    }

    pub fn set_all_frozen(&mut self, frozen: bool) {
        for e in &mut self.entries {
            e.frozen = frozen;
        }
    }

    /// SHA-256 over names, shapes and raw values of parameters under `prefix`.
    pub fn hash_prefix(&self, prefix: &str) -> String {
        let mut h = Sha256::new();
        for e in self.entries.iter().filter(|e| e.name.starts_with(prefix)) {
            h.update(e.name.as_bytes());
            for &d in e.value.shape() {
                h.update((d as u64).to_le_bytes());
            }
            for v in e.value.data() {
                h.update(v.to_f64_lossy().to_bits().to_le_bytes());
            }
        }
        h.finalize().iter().map(|b| format!("{b:02x}")).collect()
    }

    pub fn hash(&self) -> String {
        self.hash_prefix("")
    }
}

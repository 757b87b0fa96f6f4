use sha2::{Digest, Sha256};

use super::array::DArray;
use super::rng::RngState;
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub(crate) usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Named learnable tensors and their gradient buffers.
#[derive(Clone, Debug, Default)]
pub struct ParamStore {
    names: Vec<String>,
    values: Vec<DArray>,
    grads: Vec<DArray>,
    frozen: Vec<bool>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, value: DArray) -> ParamId {
        let name = name.into();
        debug_assert!(!self.names.contains(&name), "duplicate parameter {name}");
        self.grads.push(DArray::zeros(value.shape()));
        self.values.push(value);
        self.names.push(name);
        self.frozen.push(false);
        ParamId(self.values.len() - 1)
    }

    pub fn zeros(&mut self, name: impl Into<String>, shape: &[usize]) -> ParamId {
        self.add(name, DArray::zeros(shape))
    }

    pub fn ones(&mut self, name: impl Into<String>, shape: &[usize]) -> ParamId {
        self.add(name, DArray::full(shape, 1.0))
    }

    /// Normal(0, std) truncated to [-2, 2].
    pub fn trunc_normal(
        &mut self,
        name: impl Into<String>,
        shape: &[usize],
        std: f64,
        rng: &mut RngState,
    ) -> ParamId {
        let mut v = DArray::zeros(shape);
        v.data_mut().iter_mut().for_each(|x| *x = rng.truncated_normal(std, -2.0, 2.0));
        self.add(name, v)
    }

    /// Xavier-uniform weight for a `[fan_in, fan_out]` matrix.
    pub fn xavier(
        &mut self,
        name: impl Into<String>,
        fan_in: usize,
        fan_out: usize,
        rng: &mut RngState,
    ) -> ParamId {
        let a = (6.0 / (fan_in + fan_out) as f64).sqrt();
        let mut v = DArray::zeros(&[fan_in, fan_out]);
        v.data_mut().iter_mut().for_each(|x| *x = rng.uniform_range(-a, a));
        self.add(name, v)
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.values.len()).map(ParamId)
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.names.iter().position(|n| n == name).map(ParamId)
    }

    pub fn value(&self, id: ParamId) -> &DArray {
        &self.values[id.0]
    }

    pub fn value_mut(&mut self, id: ParamId) -> &mut DArray {
        &mut self.values[id.0]
    }

    pub fn grad(&self, id: ParamId) -> &DArray {
        &self.grads[id.0]
    }

    pub(crate) fn accumulate_grad(&mut self, id: ParamId, g: &DArray) {
        self.grads[id.0].add_assign(g);
    }

    pub fn zero_grads(&mut self) {
        for g in &mut self.grads {
            g.data_mut().iter_mut().for_each(|v| *v = 0.0);
        }
    }

    pub fn is_frozen(&self, id: ParamId) -> bool {
        self.frozen[id.0]
    }

    /// Freeze every parameter whose name starts with `prefix`.
    pub fn set_frozen_prefix(&mut self, prefix: &str, frozen: bool) {
        for (i, n) in self.names.iter().enumerate() {
            if n.starts_with(prefix) {
                self.frozen[i] = frozen;
            }
        }
    }

    pub fn n_scalars(&self) -> usize {
        self.values.iter().map(DArray::len).sum()
    }

    /// SHA-256 over names, shapes and value bits of parameters matching `prefix`.
    pub fn hash_prefix(&self, prefix: &str) -> String {
        let mut h = Sha256::new();
        for (n, v) in self.names.iter().zip(&self.values) {
            if !n.starts_with(prefix) {
                continue;
            }
            h.update(n.as_bytes());
            for d in v.shape() {
                h.update((*d as u64).to_le_bytes());
            }
            for x in v.data() {
                h.update(x.to_bits().to_le_bytes());
            }
        }
        h.finalize().iter().map(|b| format!("{b:02x}")).collect()
    }

    /// Copy values of same-named parameters from `other`.
    pub fn load_from(&mut self, other: &ParamStore) -> Result<usize> {
        let mut copied = 0;
        for (i, name) in self.names.iter().enumerate() {
            if let Some(j) = other.find(name) {
                let src = &other.values[j.0];
                if src.shape() != self.values[i].shape() {
                    return Err(Error::shape(
                        "ParamStore::load_from",
                        format!("{name}: {:?} vs {:?}", src.shape(), self.values[i].shape()),
                    ));
                }
                self.values[i] = src.clone();
                copied += 1;
            }
        }
        Ok(copied)
    }

    pub fn check_finite(&self) -> Result<()> {
        for (n, v) in self.names.iter().zip(&self.values) {
            if !v.is_finite() {
                return Err(Error::NonFinite(format!("parameter {n}")));
            }
        }
        Ok(())
    }
}

use std::collections::HashMap;

use sha2::{Digest, Sha256};

use crate::autograd::{Gradients, Real, Tensor};
use crate::error::{config_err, shape_err, Result};

/// Stable handle into a [`ParamStore`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub(crate) usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Named parameter registry. Names are unique; the registry order is the
/// insertion order and is what gets serialized into checkpoints.
#[derive(Debug, Clone, Default)]
pub struct ParamStore<T: Real = f32> {
    names: Vec<String>,
    tensors: Vec<Tensor<T>>,
    index: HashMap<String, ParamId>,
}

impl<T: Real> ParamStore<T> {
    pub fn new() -> Self {
        Self {
            names: Vec::new(),
            tensors: Vec::new(),
            index: HashMap::new(),
        }
    }

    /// Registers a trainable parameter. Duplicate names are rejected.
    pub fn insert(&mut self, name: impl Into<String>, tensor: Tensor<T>) -> Result<ParamId> {
        let name = name.into();
        if self.index.contains_key(&name) {
            return Err(config_err!("duplicate parameter name '{name}'"));
        }
        let id = ParamId(self.tensors.len());
        self.index.insert(name.clone(), id);
        self.names.push(name);
        self.tensors.push(tensor.with_requires_grad(true));
        Ok(id)
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.index.get(name).copied()
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn get(&self, id: ParamId) -> &Tensor<T> {
        &self.tensors[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor<T> {
        &mut self.tensors[id.0]
    }

    pub fn by_name(&self, name: &str) -> Option<&Tensor<T>> {
        self.id(name).map(|id| self.get(id))
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> + '_ {
        (0..self.tensors.len()).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &str, &Tensor<T>)> + '_ {
        self.names
            .iter()
            .zip(&self.tensors)
            .enumerate()
            .map(|(i, (n, t))| (ParamId(i), n.as_str(), t))
    }

    /// Replaces the value of an existing parameter, keeping its flags.
    pub fn set_value(&mut self, id: ParamId, value: &Tensor<T>) -> Result<()> {
        let t = &mut self.tensors[id.0];
        if t.shape() != value.shape() {
            return Err(shape_err!(
                "parameter '{}' has shape {:?}, got {:?}",
                self.names[id.0],
                t.shape(),
                value.shape()
            ));
        }
        t.data_mut().copy_from_slice(value.data());
        Ok(())
    }

    /// Marks exactly the parameters accepted by `trainable` as requiring grad.
    pub fn set_trainable(&mut self, mut trainable: impl FnMut(&str) -> bool) {
        for (name, t) in self.names.iter().zip(self.tensors.iter_mut()) {
            t.set_requires_grad(trainable(name));
        }
    }

    pub fn trainable_ids(&self) -> Vec<ParamId> {
        self.iter()
            .filter(|(_, _, t)| t.requires_grad())
            .map(|(id, _, _)| id)
            .collect()
    }

    pub fn numel(&self) -> usize {
        self.tensors.iter().map(|t| t.numel()).sum()
    }

    pub fn trainable_numel(&self) -> usize {
        self.tensors
            .iter()
            .filter(|t| t.requires_grad())
            .map(|t| t.numel())
            .sum()
    }

    pub fn zero_grads(&mut self) {
        self.tensors.iter_mut().for_each(Tensor::zero_grad);
    }

    /// Adds the parameter gradients collected by a tape into the grad buffers.
    pub fn accumulate(&mut self, grads: &Gradients<T>) -> Result<()> {
        for (id, g) in grads.params() {
            self.tensors[id.0].accumulate_grad(g)?;
        }
        Ok(())
    }

    pub fn cast<U: Real>(&self) -> ParamStore<U> {
        ParamStore {
            names: self.names.clone(),
            tensors: self.tensors.iter().map(Tensor::cast).collect(),
            index: self.index.clone(),
        }
    }

    /// SHA-256 over names, shapes and raw values of the selected parameters.
    pub fn hash_where(&self, mut select: impl FnMut(&str) -> bool) -> String {
        let mut h = Sha256::new();
        for (_, name, t) in self.iter().filter(|(_, n, _)| select(n)) {
            h.update((name.len() as u64).to_le_bytes());
            h.update(name.as_bytes());
            for d in t.shape() {
                h.update((*d as u64).to_le_bytes());
            }
            for v in t.data() {
                h.update(v.as_f64().to_le_bytes());
            }
        }
        h.finalize().iter().map(|b| format!("{b:02x}")).collect()
    }

    pub fn hash(&self) -> String {
        self.hash_where(|_| true)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn duplicate_names_rejected() {
        let mut s = ParamStore::<f32>::new();
        s.insert("a", Tensor::zeros(&[2])).unwrap();
        assert!(s.insert("a", Tensor::zeros(&[2])).is_err());
    }

    #[test]
    fn hash_changes_with_value() {
        let mut s = ParamStore::<f32>::new();
        let id = s.insert("a", Tensor::zeros(&[2])).unwrap();
        let before = s.hash();
        s.get_mut(id).data_mut()[1] = 1e-30;
        assert_ne!(before, s.hash());
    }

    #[test]
    fn trainable_mask_clears_grads() {
        let mut s = ParamStore::<f32>::new();
        let a = s.insert("keep.x", Tensor::zeros(&[2])).unwrap();
        let b = s.insert("frozen.y", Tensor::zeros(&[3])).unwrap();
        s.get_mut(b).accumulate_grad(&[1.0; 3]).unwrap();
        s.set_trainable(|n| n.starts_with("keep"));
        assert_eq!(s.trainable_ids(), vec![a]);
        assert!(s.get(b).grad().is_none());
        assert_eq!(s.trainable_numel(), 2);
    }
}

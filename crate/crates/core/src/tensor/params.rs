use std::collections::HashMap;
use std::sync::atomic::{AtomicU64, Ordering};

use super::{Real, Tensor};
use crate::error::{Error, Result};

static NEXT_STORE: AtomicU64 = AtomicU64::new(1);

/// Index of a parameter inside its [`ParamStore`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub(crate) usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Named, trainable tensors. Modules keep [`ParamId`]s into a store, so one
/// store can back several modules and weight sharing is just id sharing.
#[derive(Debug)]
pub struct ParamStore<T> {
    uid: u64,
    tensors: Vec<Tensor<T>>,
    names: Vec<String>,
    index: HashMap<String, ParamId>,
}

impl<T: Real> Default for ParamStore<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Real> Clone for ParamStore<T> {
    fn clone(&self) -> Self {
        Self {
            uid: NEXT_STORE.fetch_add(1, Ordering::Relaxed),
            tensors: self.tensors.clone(),
            names: self.names.clone(),
            index: self.index.clone(),
        }
    }
}

impl<T: Real> ParamStore<T> {
    pub fn new() -> Self {
        Self {
            uid: NEXT_STORE.fetch_add(1, Ordering::Relaxed),
            tensors: Vec::new(),
            names: Vec::new(),
            index: HashMap::new(),
        }
    }

    pub(crate) fn uid(&self) -> u64 {
        self.uid
    }

    pub fn add(&mut self, name: impl Into<String>, mut tensor: Tensor<T>) -> Result<ParamId> {
        let name = name.into();
        if self.index.contains_key(&name) {
            return Err(Error::contract(format!("duplicate parameter name `{name}`")));
        }
        tensor.set_requires_grad(true);
        let id = ParamId(self.tensors.len());
        self.tensors.push(tensor);
        self.names.push(name.clone());
        self.index.insert(name, id);
        Ok(id)
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    /// Total scalar count over all parameters.
    pub fn num_scalars(&self) -> usize {
        self.tensors.iter().map(Tensor::numel).sum()
    }

    pub fn get(&self, id: ParamId) -> &Tensor<T> {
        &self.tensors[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor<T> {
        &mut self.tensors[id.0]
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.index.get(name).copied()
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> + '_ {
        (0..self.tensors.len()).map(ParamId)
    }

    /// Ids whose name starts with `prefix`, in insertion order.
    pub fn ids_with_prefix<'a>(&'a self, prefix: &'a str) -> impl Iterator<Item = ParamId> + 'a {
        self.ids().filter(move |&id| self.names[id.0].starts_with(prefix))
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor<T>)> {
        self.names.iter().map(String::as_str).zip(self.tensors.iter())
    }

    pub fn zero_grads(&mut self) {
        self.tensors.iter_mut().for_each(Tensor::zero_grad);
    }

    /// Zeroes every gradient, allocating one where none exists yet, so that
    /// parameters unreachable from a loss still carry a (zero) gradient.
    pub fn reset_grads(&mut self) {
        for t in &mut self.tensors {
            match t.grad() {
                Some(_) => t.zero_grad(),
                None => t.accumulate_grad(&vec![T::zero(); t.numel()]),
            }
        }
    }

    /// Marks the given parameters as frozen (or not): frozen parameters are
    /// recorded as constants and receive no gradient.
    pub fn set_trainable(&mut self, ids: &[ParamId], on: bool) {
        for &id in ids {
            self.tensors[id.0].set_requires_grad(on);
        }
    }

    /// Copies values (not gradients) for every name in `src` matching `prefix`.
    pub fn copy_from(&mut self, src: &ParamStore<T>, prefix: &str) -> Result<usize> {
        let mut copied = 0;
        for (name, t) in src.iter().filter(|(n, _)| n.starts_with(prefix)) {
            let id = self.id(name).ok_or_else(|| Error::Checkpoint {
                name: name.to_string(),
                message: "not present in target model".into(),
            })?;
            let dst = &mut self.tensors[id.0];
            if dst.shape() != t.shape() {
                return Err(Error::Checkpoint {
                    name: name.to_string(),
                    message: format!("shape {:?} vs {:?}", t.shape(), dst.shape()),
                });
            }
            dst.data_mut().copy_from_slice(t.data());
            copied += 1;
        }
        Ok(copied)
    }

    /// Value equality of two stores, name by name, compared bitwise.
    pub fn bitwise_eq(&self, other: &ParamStore<T>) -> bool {
        self.names == other.names
            && self.tensors.iter().zip(&other.tensors).all(|(a, b)| {
                a.shape() == b.shape()
                    && a.data().iter().zip(b.data()).all(|(x, y)| x.as_f64().to_bits() == y.as_f64().to_bits())
            })
    }
}

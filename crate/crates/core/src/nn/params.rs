use std::collections::HashMap;

use super::scalar::Scalar;
use super::tensor::Tensor;
use crate::{Error, Result};

/// Index of a parameter inside a [`ParamStore`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct ParamId(pub usize);

/// Named learnable arrays with one gradient buffer each.
///
/// Values and gradients live in separate vectors so a forward pass can read
/// the values while a backward pass writes the gradients.
#[derive(Clone, Debug)]
pub struct ParamStore<T> {
    names: Vec<String>,
    index: HashMap<String, usize>,
    pub values: Vec<Tensor<T>>,
    pub grads: Vec<Tensor<T>>,
}

impl<T: Scalar> Default for ParamStore<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> ParamStore<T> {
    pub fn new() -> Self {
        ParamStore {
            names: Vec::new(),
            index: HashMap::new(),
            values: Vec::new(),
            grads: Vec::new(),
        }
    }

    pub fn add(&mut self, name: &str, value: Tensor<T>) -> Result<ParamId> {
        if self.index.contains_key(name) {
            return Err(Error::Argument(format!("duplicate parameter name {name}")));
        }
        let id = self.values.len();
        self.index.insert(name.to_string(), id);
        self.names.push(name.to_string());
        self.grads.push(Tensor::zeros(value.shape()));
        self.values.push(value);
        Ok(ParamId(id))
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.index.get(name).map(|&i| ParamId(i))
    }

    pub fn value(&self, id: ParamId) -> &Tensor<T> {
        &self.values[id.0]
    }

    pub fn value_mut(&mut self, id: ParamId) -> &mut Tensor<T> {
        &mut self.values[id.0]
    }

    pub fn grad(&self, id: ParamId) -> &Tensor<T> {
        &self.grads[id.0]
    }

    pub fn zero_grads(&mut self) {
        for g in &mut self.grads {
            g.fill(T::zero());
        }
    }

    /// A zeroed gradient buffer with the same layout as this store.
    pub fn grad_buffer(&self) -> Vec<Tensor<T>> {
        self.values.iter().map(|v| Tensor::zeros(v.shape())).collect()
    }

    /// Adds an external gradient buffer (e.g. one instance's) into the store.
    pub fn accumulate(&mut self, buf: &[Tensor<T>]) {
        for (g, b) in self.grads.iter_mut().zip(buf) {
            g.add_assign(b);
        }
    }

    pub fn num_scalars(&self) -> usize {
        self.values.iter().map(|v| v.len()).sum()
    }

    pub fn all_finite(&self) -> bool {
        self.values.iter().all(|v| v.is_finite())
    }

    pub fn cast<U: Scalar>(&self) -> ParamStore<U> {
        ParamStore {
            names: self.names.clone(),
            index: self.index.clone(),
            values: self.values.iter().map(|v| v.cast()).collect(),
            grads: self.grads.iter().map(|v| v.cast()).collect(),
        }
    }
}

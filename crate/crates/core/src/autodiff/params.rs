use std::collections::HashMap;

use super::{Tensor, TensorError};

/// Named, ordered collection of trainable tensors.
///
/// Iteration follows insertion order. Each entry carries a "touched" flag
/// that is set whenever a backward pass writes a gradient into it and cleared
/// by [`ParameterSet::zero_grad`].
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParameterSet {
    names: Vec<String>,
    tensors: Vec<Tensor>,
    touched: Vec<bool>,
    index: HashMap<String, usize>,
}

impl ParameterSet {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, tensor: Tensor) -> Result<usize, TensorError> {
        let name = name.into();
        if self.index.contains_key(&name) {
            return Err(TensorError::DuplicateParameter(name));
        }
        let idx = self.tensors.len();
        self.index.insert(name.clone(), idx);
        self.names.push(name);
        self.tensors.push(tensor.with_grad());
        self.touched.push(false);
        Ok(idx)
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.index.get(name).copied()
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.index_of(name).map(|i| &self.tensors[i])
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.index_of(name).map(move |i| &mut self.tensors[i])
    }

    pub fn name(&self, idx: usize) -> &str {
        &self.names[idx]
    }

    pub fn tensor(&self, idx: usize) -> &Tensor {
        &self.tensors[idx]
    }

    pub fn tensor_mut(&mut self, idx: usize) -> &mut Tensor {
        &mut self.tensors[idx]
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.names.iter().map(String::as_str).zip(self.tensors.iter())
    }

    pub fn is_touched(&self, idx: usize) -> bool {
        self.touched[idx]
    }

    /// Total number of scalar parameters.
    pub fn num_values(&self) -> usize {
        self.tensors.iter().map(Tensor::len).sum()
    }

    pub fn zero_grad(&mut self) {
        for (t, flag) in self.tensors.iter_mut().zip(self.touched.iter_mut()) {
            t.zero_grad();
            *flag = false;
        }
    }

    pub(crate) fn accumulate_grad(&mut self, idx: usize, grad: &[f64]) {
        let dst = self.tensors[idx]
            .grad_mut()
            .expect("parameters always carry a gradient buffer");
        for (d, g) in dst.iter_mut().zip(grad) {
            *d += g;
        }
        self.touched[idx] = true;
    }
}

use alloc::collections::BTreeMap;
use alloc::format;
use alloc::string::{String, ToString};
use alloc::vec::Vec;

use super::Matrix;
use crate::error::{contract, shape, Result};

#[derive(Debug, Clone, PartialEq)]
struct Entry {
    name: String,
    value: Matrix,
    grad: Matrix,
}

/// Named parameter tensors with same-shaped gradient accumulators.
///
/// Iteration order is insertion order, which keeps optimizer state and
/// serialization stable.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParamStore {
    entries: Vec<Entry>,
    index: BTreeMap<String, usize>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: &str, value: Matrix) -> Result<()> {
        if self.index.contains_key(name) {
            return Err(contract(
                "ParamStore::insert",
                format!("duplicate parameter {name}"),
            ));
        }
        let grad = Matrix::zeros(value.rows(), value.cols());
        self.index.insert(name.to_string(), self.entries.len());
        self.entries.push(Entry {
            name: name.to_string(),
            value,
            grad,
        });
        Ok(())
    }

    fn slot(&self, name: &str) -> Result<usize> {
        self.index
            .get(name)
            .copied()
            .ok_or_else(|| contract("ParamStore", format!("unknown parameter {name}")))
    }

    pub fn get(&self, name: &str) -> Result<&Matrix> {
        Ok(&self.entries[self.slot(name)?].value)
    }

    pub fn get_mut(&mut self, name: &str) -> Result<&mut Matrix> {
        let i = self.slot(name)?;
        Ok(&mut self.entries[i].value)
    }

    pub fn grad(&self, name: &str) -> Result<&Matrix> {
        Ok(&self.entries[self.slot(name)?].grad)
    }

    /// Replaces a parameter's value; the shape must not change.
    pub fn set(&mut self, name: &str, value: Matrix) -> Result<()> {
        let i = self.slot(name)?;
        if self.entries[i].value.shape() != value.shape() {
            return Err(shape(
                "ParamStore::set",
                format!(
                    "{name}: {:?} -> {:?}",
                    self.entries[i].value.shape(),
                    value.shape()
                ),
            ));
        }
        self.entries[i].value = value;
        Ok(())
    }

    /// Adds `delta` into the gradient of `name`.
    pub fn accumulate(&mut self, name: &str, delta: &Matrix) -> Result<()> {
        let i = self.slot(name)?;
        self.entries[i].grad.add_assign(delta)
    }

    pub fn zero_grads(&mut self) {
        for e in &mut self.entries {
            e.grad.fill(0.0);
        }
    }

    pub fn scale_grads(&mut self, factor: f64) {
        for e in &mut self.entries {
            e.grad.scale(factor);
        }
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn num_scalars(&self) -> usize {
        self.entries.iter().map(|e| e.value.data().len()).sum()
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.entries.iter().map(|e| e.name.as_str())
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Matrix)> {
        self.entries.iter().map(|e| (e.name.as_str(), &e.value))
    }

    /// `(name, value, grad)` triples, for optimizers.
    pub fn iter_with_grads_mut(&mut self) -> impl Iterator<Item = (&str, &mut Matrix, &Matrix)> {
        self.entries
            .iter_mut()
            .map(|e| (e.name.as_str(), &mut e.value, &e.grad))
    }

    pub fn all_finite(&self) -> bool {
        self.entries.iter().all(|e| e.value.is_finite())
    }

    pub(crate) fn entry_count(&self) -> usize {
        self.entries.len()
    }

    pub(crate) fn entry_name(&self, i: usize) -> &str {
        &self.entries[i].name
    }

    pub(crate) fn entry_value_mut(&mut self, i: usize) -> &mut Matrix {
        &mut self.entries[i].value
    }

    pub(crate) fn entry_grad(&self, i: usize) -> &Matrix {
        &self.entries[i].grad
    }
}

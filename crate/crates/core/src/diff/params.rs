use std::collections::BTreeMap;

use super::{DiffError, Gradients};
use crate::tensor::Matrix;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub(crate) usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// A named, differentiable array with its gradient accumulator.
#[derive(Debug, Clone, PartialEq)]
pub struct Parameter {
    pub name: String,
    pub value: Matrix,
    pub grad: Matrix,
}

/// Parameters in insertion order, addressable by id or by name.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParamStore {
    params: Vec<Parameter>,
    by_name: BTreeMap<String, usize>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, value: Matrix) -> Result<ParamId, DiffError> {
        let name = name.into();
        if self.by_name.contains_key(&name) {
            return Err(DiffError::DuplicateParameter(name));
        }
        let (r, c) = value.shape();
        let id = self.params.len();
        self.by_name.insert(name.clone(), id);
        self.params.push(Parameter {
            name,
            value,
            grad: Matrix::zeros(r, c),
        });
        Ok(ParamId(id))
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.params.len()).map(ParamId)
    }

    pub fn id(&self, name: &str) -> Result<ParamId, DiffError> {
        self.by_name
            .get(name)
            .map(|&i| ParamId(i))
            .ok_or_else(|| DiffError::UnknownParameter(name.to_string()))
    }

    pub fn get(&self, id: ParamId) -> &Parameter {
        &self.params[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Parameter {
        &mut self.params[id.0]
    }

    pub fn value(&self, id: ParamId) -> &Matrix {
        &self.params[id.0].value
    }

    pub fn value_mut(&mut self, id: ParamId) -> &mut Matrix {
        &mut self.params[id.0].value
    }

    pub fn iter(&self) -> impl Iterator<Item = &Parameter> {
        self.params.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = &mut Parameter> {
        self.params.iter_mut()
    }

    /// Total number of scalar entries.
    pub fn scalar_count(&self) -> usize {
        self.params.iter().map(|p| p.value.len()).sum()
    }

    pub fn zero_grads(&mut self) {
        for p in &mut self.params {
            p.grad.data_mut().fill(0.0);
        }
    }

    /// Adds the parameter gradients of one backward pass into the accumulators.
    pub fn accumulate(&mut self, grads: &Gradients) {
        for (id, g) in grads.params() {
            self.params[id.0].grad.add_assign(g);
        }
    }
}

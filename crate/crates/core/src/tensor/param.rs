use super::{Scalar, Shape, Tensor};
use crate::error::{Error, Result};
use std::collections::BTreeMap;

/// Index of a parameter inside its [`ParamStore`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub(crate) usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// One named parameter. `dims` is the logical shape (rank 1 for biases and
/// normalization vectors, rank 4 for kernels); `value` stores it as NCHW.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamTensor<T = f32> {
    pub name: String,
    pub dims: Vec<usize>,
    pub value: Tensor<T>,
    /// Running statistics of batch normalization are stored but not trained.
    pub trainable: bool,
}

/// Named parameters of one network. Iteration is name-sorted.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct ParamStore<T = f32> {
    entries: Vec<ParamTensor<T>>,
    index: BTreeMap<String, ParamId>,
}

pub(crate) fn dims_to_shape(dims: &[usize]) -> Shape {
    match *dims {
        [c] => Shape::new(1, c, 1, 1),
        [n, c] => Shape::new(n, c, 1, 1),
        [n, c, h] => Shape::new(n, c, h, 1),
        [n, c, h, w] => Shape::new(n, c, h, w),
        _ => Shape::new(0, 0, 0, 0),
    }
}

impl<T: Scalar> ParamStore<T> {
    pub fn new() -> Self {
        ParamStore {
            entries: Vec::new(),
            index: BTreeMap::new(),
        }
    }

    /// Registers a parameter; names must be unique.
    pub fn insert(
        &mut self,
        name: impl Into<String>,
        dims: Vec<usize>,
        data: Vec<T>,
        trainable: bool,
    ) -> Result<ParamId> {
        let name = name.into();
        if self.index.contains_key(&name) {
            return Err(Error::contract(
                "ParamStore::insert",
                format!("duplicate parameter name `{name}`"),
            ));
        }
        if dims.is_empty() || dims.len() > 4 {
            return Err(Error::contract(
                "ParamStore::insert",
                format!("`{name}` has unsupported rank {}", dims.len()),
            ));
        }
        let value = Tensor::from_vec(dims_to_shape(&dims), data)?;
        let id = ParamId(self.entries.len());
        self.entries.push(ParamTensor {
            name: name.clone(),
            dims,
            value,
            trainable,
        });
        self.index.insert(name, id);
        Ok(id)
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.index.get(name).copied()
    }

    pub fn require(&self, name: &str) -> Result<ParamId> {
        self.id(name).ok_or_else(|| {
            Error::contract("ParamStore", format!("missing parameter `{name}`"))
        })
    }

    pub fn get(&self, id: ParamId) -> &ParamTensor<T> {
        &self.entries[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut ParamTensor<T> {
        &mut self.entries[id.0]
    }

    pub fn by_name(&self, name: &str) -> Option<&ParamTensor<T>> {
        self.id(name).map(|id| self.get(id))
    }

    pub fn by_name_mut(&mut self, name: &str) -> Option<&mut ParamTensor<T>> {
        self.id(name).map(|id| &mut self.entries[id.0])
    }

    pub fn value(&self, id: ParamId) -> &Tensor<T> {
        &self.entries[id.0].value
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Parameters in name order.
    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &ParamTensor<T>)> + '_ {
        self.index.values().map(move |&id| (id, &self.entries[id.0]))
    }

    /// `(total, trainable)` scalar counts.
    pub fn count(&self) -> (usize, usize) {
        let total = self.entries.iter().map(|p| p.value.len()).sum();
        let trainable = self
            .entries
            .iter()
            .filter(|p| p.trainable)
            .map(|p| p.value.len())
            .sum();
        (total, trainable)
    }

    pub fn cast<U: Scalar>(&self) -> ParamStore<U> {
        ParamStore {
            entries: self
                .entries
                .iter()
                .map(|p| ParamTensor {
                    name: p.name.clone(),
                    dims: p.dims.clone(),
                    value: p.value.cast(),
                    trainable: p.trainable,
                })
                .collect(),
            index: self.index.clone(),
        }
    }

    /// Overwrites running statistics collected by a training-mode forward pass.
    pub fn apply_running_stats(&mut self, grads: &Gradients<T>) {
        for (id, values) in &grads.running_stats {
            self.entries[id.0].value.data_mut().copy_from_slice(values);
        }
    }
}

/// Result of a backward pass: one optional gradient per parameter plus the
/// batch-norm running statistics observed during the forward pass.
#[derive(Debug, Clone)]
pub struct Gradients<T = f32> {
    pub params: Vec<Option<Vec<T>>>,
    pub running_stats: Vec<(ParamId, Vec<T>)>,
    /// Gradients of leaves created with `requires_grad`.
    pub(crate) leaves: Vec<(usize, Vec<T>)>,
}

impl<T: Scalar> Gradients<T> {
    pub fn param(&self, id: ParamId) -> Option<&[T]> {
        self.params.get(id.0).and_then(|g| g.as_deref())
    }

    /// Gradient of an input created with [`Tape::leaf`](super::Tape::leaf) and `requires_grad`.
    pub fn input(&self, var: super::Var) -> Option<&[T]> {
        self.leaves
            .iter()
            .find(|(i, _)| *i == var.0)
            .map(|(_, g)| g.as_slice())
    }
}

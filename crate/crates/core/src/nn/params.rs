use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Handle into a [`ParamSet`]; stable for the life of the set.
#[derive(Copy, Clone, Debug, PartialEq, Eq)]
pub struct ParamId(usize);

impl ParamId {
    #[inline]
    pub fn index(&self) -> usize {
        self.0
    }

    #[inline]
    pub(crate) fn from_index(i: usize) -> Self {
        ParamId(i)
    }
}

/// Ordered, named parameter storage. Names are unique and used for
/// checkpoint serialization; allocation order defines the optimizer layout.
pub struct ParamSet<F> {
    names: Vec<String>,
    tensors: Vec<Tensor<F>>,
    by_name: BTreeMap<String, usize>,
}

impl<F: Scalar> Default for ParamSet<F> {
    fn default() -> Self {
        Self::new()
    }
}

impl<F: Scalar> ParamSet<F> {
    pub fn new() -> Self {
        ParamSet {
            names: Vec::new(),
            tensors: Vec::new(),
            by_name: BTreeMap::new(),
        }
    }

    pub fn alloc(&mut self, name: impl Into<String>, tensor: Tensor<F>) -> ParamId {
        let name = name.into();
        assert!(
            !self.by_name.contains_key(&name),
            "duplicate parameter name {name}"
        );
        self.names.push(name.clone());
        self.tensors.push(tensor);
        self.by_name.insert(name, self.tensors.len() - 1);
        ParamId(self.tensors.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    /// Total number of scalar parameters.
    pub fn n_scalars(&self) -> usize {
        self.tensors.iter().map(|t| t.len()).sum()
    }

    pub fn tensor(&self, id: ParamId) -> &Tensor<F> {
        &self.tensors[id.0]
    }

    pub fn tensor_mut(&mut self, id: ParamId) -> &mut Tensor<F> {
        &mut self.tensors[id.0]
    }

    pub fn tensors(&self) -> &[Tensor<F>] {
        &self.tensors
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor<F>)> {
        self.names
            .iter()
            .map(|n| n.as_str())
            .zip(self.tensors.iter())
    }

    pub fn by_name(&self, name: &str) -> Option<ParamId> {
        self.by_name.get(name).copied().map(ParamId)
    }

    /// Overwrites the tensor registered under `name`; shapes must match.
    pub fn load_named(&mut self, name: &str, tensor: Tensor<F>) -> Result<()> {
        let idx = *self
            .by_name
            .get(name)
            .ok_or_else(|| Error::Checkpoint(format!("unknown tensor {name}")))?;
        if self.tensors[idx].shape() != tensor.shape() {
            return Err(Error::Checkpoint(format!(
                "shape mismatch for {name}: expected {:?}, file has {:?}",
                self.tensors[idx].shape(),
                tensor.shape()
            )));
        }
        self.tensors[idx] = tensor;
        Ok(())
    }
}

//! Named parameter storage shared by every layer.
//!
//! Layers hold [`ParamId`]s into a [`ParamStore`]. A forward pass binds the
//! whole store into a fresh [`Graph`] as trainable leaves and resolves ids to
//! graph variables through [`ParamVars`].

use crate::autodiff::{Graph, Var};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct ParamId(usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    names: Vec<String>,
    tensors: Vec<Tensor>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor) -> ParamId {
        let name = name.into();
        debug_assert!(!self.names.contains(&name), "duplicate parameter {name}");
        self.names.push(name);
        self.tensors.push(value);
        ParamId(self.tensors.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    /// Total scalar count.
    pub fn numel(&self) -> usize {
        self.tensors.iter().map(Tensor::numel).sum()
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.tensors[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.tensors[id.0]
    }

    pub fn set(&mut self, id: ParamId, value: Tensor) {
        assert_eq!(
            self.tensors[id.0].shape(),
            value.shape(),
            "shape change for {}",
            self.names[id.0]
        );
        self.tensors[id.0] = value;
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.names.iter().position(|n| n == name).map(ParamId)
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.tensors.len()).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.names.iter().map(String::as_str).zip(&self.tensors)
    }

    pub fn tensors(&self) -> &[Tensor] {
        &self.tensors
    }

    pub fn tensors_mut(&mut self) -> &mut [Tensor] {
        &mut self.tensors
    }

    /// Registers every parameter as a trainable leaf of `g`.
    pub fn bind(&self, g: &mut Graph) -> ParamVars {
        ParamVars(self.tensors.iter().map(|t| g.param(t.clone())).collect())
    }

    /// Registers every parameter as a constant leaf (inference only).
    pub fn bind_frozen(&self, g: &mut Graph) -> ParamVars {
        ParamVars(self.tensors.iter().map(|t| g.constant(t.clone())).collect())
    }
}

/// Graph variables for a bound [`ParamStore`], indexed by [`ParamId`].
#[derive(Clone, Debug)]
pub struct ParamVars(Vec<Var>);

impl ParamVars {
    /// Uses existing graph nodes as the parameters, one per store entry in
    /// store order.
    pub fn from_vars(vars: Vec<Var>) -> Self {
        Self(vars)
    }

    pub fn get(&self, id: ParamId) -> Var {
        self.0[id.0]
    }

    /// Gradients for every parameter, in store order (zeros where unreached).
    pub fn grads(&self, g: &Graph) -> Vec<Tensor> {
        self.0.iter().map(|&v| g.grad_or_zeros(v)).collect()
    }
}

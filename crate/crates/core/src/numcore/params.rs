use indexmap::IndexMap;

use super::graph::{Gradients, Graph, Var};
use super::tensor::{Real, Tensor};
use crate::error::{Error, Result};

/// Named trainable tensors in a fixed insertion order. The order is what
/// the optimizer state and checkpoint manifest follow.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore<T> {
    tensors: IndexMap<String, Tensor<T>>,
}

impl<T: Real> ParamStore<T> {
    pub fn new() -> Self {
        Self {
            tensors: IndexMap::new(),
        }
    }

    pub fn insert(&mut self, name: impl Into<String>, value: Tensor<T>) {
        let name = name.into();
        assert!(
            !self.tensors.contains_key(&name),
            "duplicate parameter name {name}"
        );
        self.tensors.insert(name, value);
    }

    pub fn get(&self, name: &str) -> Option<&Tensor<T>> {
        self.tensors.get(name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor<T>> {
        self.tensors.get_mut(name)
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor<T>)> {
        self.tensors.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&str, &mut Tensor<T>)> {
        self.tensors.iter_mut().map(|(k, v)| (k.as_str(), v))
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.tensors.keys().map(String::as_str)
    }

    pub fn num_scalars(&self) -> usize {
        self.tensors.values().map(Tensor::len).sum()
    }

    pub fn cast<U: Real>(&self) -> ParamStore<U> {
        ParamStore {
            tensors: self
                .tensors
                .iter()
                .map(|(k, v)| (k.clone(), v.cast()))
                .collect(),
        }
    }

    /// Puts every parameter on `graph` as a leaf. On an inference graph the
    /// leaves carry no gradient state.
    pub fn bind(&self, graph: &mut Graph<T>) -> Bound {
        Bound {
            vars: self
                .tensors
                .iter()
                .map(|(k, v)| (k.clone(), graph.param(v.clone())))
                .collect(),
        }
    }
}

/// Parameter name → graph leaf for one forward pass.
#[derive(Clone, Debug)]
pub struct Bound {
    vars: IndexMap<String, Var>,
}

impl Bound {
    /// Pairs names with already-created leaves (used when something other
    /// than [`ParamStore::bind`] owns leaf creation, e.g. gradient checks).
    pub fn from_parts(names: &[String], vars: &[Var]) -> Self {
        assert_eq!(names.len(), vars.len());
        Self {
            vars: names.iter().cloned().zip(vars.iter().copied()).collect(),
        }
    }

    pub fn get(&self, name: &str) -> Result<Var> {
        self.vars
            .get(name)
            .copied()
            .ok_or_else(|| Error::Config(format!("parameter `{name}` is not bound")))
    }

    pub fn has(&self, name: &str) -> bool {
        self.vars.contains_key(name)
    }

    /// Gradients for every bound parameter in store order; parameters that
    /// did not influence the root get zeros.
    pub fn gradients<T: Real>(&self, graph: &Graph<T>, grads: &Gradients<T>) -> Vec<Tensor<T>> {
        self.vars
            .values()
            .map(|&v| grads.get_or_zeros(graph, v))
            .collect()
    }
}

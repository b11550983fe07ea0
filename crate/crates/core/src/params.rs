//! Named, ordered parameter storage that persists across per-step graphs.

use std::collections::HashMap;

use crate::autograd::{Graph, Var};
use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

#[derive(Clone, Debug, PartialEq)]
pub struct ParamStore<S> {
    names: Vec<String>,
    tensors: Vec<Tensor<S>>,
    index: HashMap<String, usize>,
}

impl<S> Default for ParamStore<S> {
    fn default() -> Self {
        ParamStore {
            names: Vec::new(),
            tensors: Vec::new(),
            index: HashMap::new(),
        }
    }
}

impl<S: Scalar> ParamStore<S> {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, t: Tensor<S>) -> Result<()> {
        let name = name.into();
        if self.index.contains_key(&name) {
            return Err(Error::Config(format!("duplicate parameter {name}")));
        }
        self.index.insert(name.clone(), self.names.len());
        self.names.push(name);
        self.tensors.push(t);
        Ok(())
    }

    pub fn get(&self, name: &str) -> Result<&Tensor<S>> {
        self.index
            .get(name)
            .map(|&i| &self.tensors[i])
            .ok_or_else(|| Error::Config(format!("missing parameter {name}")))
    }

    pub fn position(&self, name: &str) -> Option<usize> {
        self.index.get(name).copied()
    }

    pub fn len(&self) -> usize {
        self.names.len()
    }

    pub fn is_empty(&self) -> bool {
        self.names.is_empty()
    }

    /// Total scalar count.
    pub fn numel(&self) -> usize {
        self.tensors.iter().map(Tensor::len).sum()
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn tensors(&self) -> &[Tensor<S>] {
        &self.tensors
    }

    pub fn tensors_mut(&mut self) -> &mut [Tensor<S>] {
        &mut self.tensors
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor<S>)> {
        self.names.iter().map(String::as_str).zip(&self.tensors)
    }

    pub fn cast<T: Scalar>(&self) -> ParamStore<T> {
        ParamStore {
            names: self.names.clone(),
            tensors: self.tensors.iter().map(Tensor::cast).collect(),
            index: self.index.clone(),
        }
    }

    /// Append every tensor of `other`, prefixing its names.
    pub fn extend_prefixed(&mut self, prefix: &str, other: ParamStore<S>) -> Result<()> {
        for (name, t) in other.names.into_iter().zip(other.tensors) {
            self.insert(format!("{prefix}{name}"), t)?;
        }
        Ok(())
    }

    /// Copy every parameter into `graph` as a trainable leaf.
    pub fn bind(&self, graph: &mut Graph<S>) -> Bound<'_, S> {
        let vars = self
            .tensors
            .iter()
            .map(|t| graph.param(t.clone()))
            .collect();
        Bound { store: self, vars }
    }
}

/// Parameters bound to the leaves of one graph.
pub struct Bound<'a, S> {
    store: &'a ParamStore<S>,
    vars: Vec<Var>,
}

impl<S: Scalar> Bound<'_, S> {
    pub fn var(&self, name: &str) -> Result<Var> {
        self.store
            .position(name)
            .map(|i| self.vars[i])
            .ok_or_else(|| Error::Config(format!("missing parameter {name}")))
    }

    pub fn vars(&self) -> &[Var] {
        &self.vars
    }

    /// Gradients of all parameters in store order (zeros when unreachable).
    pub fn grads(&self, graph: &Graph<S>) -> Vec<Vec<S>> {
        self.vars
            .iter()
            .zip(self.store.tensors())
            .map(|(&v, t)| {
                graph
                    .grad(v)
                    .map(<[S]>::to_vec)
                    .unwrap_or_else(|| vec![S::zero(); t.len()])
            })
            .collect()
    }
}

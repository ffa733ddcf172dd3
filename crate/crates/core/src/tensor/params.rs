use std::collections::HashMap;

use indexmap::IndexMap;

use super::{Graph, Tensor, Var};
use crate::error::{Error, Result};

/// Gradients keyed by parameter name.
pub type GradMap = IndexMap<String, Vec<f64>>;

/// Named, insertion-ordered parameter tensors.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    params: IndexMap<String, Tensor>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, tensor: Tensor) {
        self.params.insert(name.into(), tensor);
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.params.get(name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.params.get_mut(name)
    }

    pub fn contains(&self, name: &str) -> bool {
        self.params.contains_key(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.params.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&str, &mut Tensor)> {
        self.params.iter_mut().map(|(k, v)| (k.as_str(), v))
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.params.keys().map(String::as_str)
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    /// Total number of scalar parameters.
    pub fn element_count(&self) -> usize {
        self.params.values().map(Tensor::len).sum()
    }

    pub fn into_inner(self) -> IndexMap<String, Tensor> {
        self.params
    }

    pub fn from_map(params: IndexMap<String, Tensor>) -> Self {
        ParamStore { params }
    }
}

/// Binds store parameters into a graph at most once per name, so a
/// parameter referenced from several places accumulates a single gradient.
#[derive(Debug)]
pub struct Binder {
    vars: HashMap<String, Var>,
    order: Vec<String>,
    track_grad: bool,
}

impl Binder {
    pub fn new(track_grad: bool) -> Self {
        Binder {
            vars: HashMap::new(),
            order: Vec::new(),
            track_grad,
        }
    }

    pub fn tracks_grad(&self) -> bool {
        self.track_grad
    }

    pub fn bind(&mut self, graph: &mut Graph, store: &ParamStore, name: &str) -> Result<Var> {
        if let Some(&v) = self.vars.get(name) {
            return Ok(v);
        }
        let tensor = store
            .get(name)
            .ok_or_else(|| Error::InvalidArgument(format!("unknown parameter {name}")))?;
        let v = graph.leaf(tensor.clone().with_requires_grad(self.track_grad));
        self.vars.insert(name.to_string(), v);
        self.order.push(name.to_string());
        Ok(v)
    }

    pub fn var(&self, name: &str) -> Option<Var> {
        self.vars.get(name).copied()
    }

    /// Gradients of every bound parameter reached by the last backward pass.
    pub fn grads(&self, graph: &Graph) -> GradMap {
        self.order
            .iter()
            .filter_map(|name| {
                let v = self.vars[name];
                graph.grad(v).map(|g| (name.clone(), g.to_vec()))
            })
            .collect()
    }
}

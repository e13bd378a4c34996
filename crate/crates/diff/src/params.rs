//! Named parameter collections and their flat-vector view.

use std::collections::BTreeMap;
use std::ops::Range;

use serde::{Deserialize, Serialize};

use crate::graph::{Graph, Var};
use crate::tensor::Tensor;
use crate::DiffError;

/// Named tensors with a deterministic flattening order (sorted by name).
///
/// Gradient vectors, Fisher vectors and Adam moments all index into the flat
/// concatenation of the tensors in this order.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct ParamStore {
    tensors: BTreeMap<String, Tensor>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    /// Inserts a tensor. Names must be unique.
    pub fn insert(&mut self, name: impl Into<String>, tensor: Tensor) {
        let name = name.into();
        assert!(
            !self.tensors.contains_key(&name),
            "duplicate parameter name {name}"
        );
        self.tensors.insert(name, tensor);
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.tensors.get(name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.tensors.get_mut(name)
    }

    /// Looks up a parameter that must exist.
    pub fn tensor(&self, name: &str) -> &Tensor {
        self.tensors
            .get(name)
            .unwrap_or_else(|| panic!("missing parameter {name}"))
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.tensors.keys().map(String::as_str)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.tensors.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    /// Total number of scalar parameters.
    pub fn num_values(&self) -> usize {
        self.tensors.values().map(Tensor::len).sum()
    }

    /// Range of each named tensor inside the flat vector.
    pub fn layout(&self) -> Vec<(String, Range<usize>)> {
        let mut offset = 0;
        self.tensors
            .iter()
            .map(|(name, t)| {
                let range = offset..offset + t.len();
                offset += t.len();
                (name.clone(), range)
            })
            .collect()
    }

    pub fn flatten(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.num_values());
        for t in self.tensors.values() {
            out.extend_from_slice(t.data());
        }
        out
    }

    /// Overwrites all values from a flat vector in flattening order.
    pub fn assign_flat(&mut self, flat: &[f64]) -> Result<(), DiffError> {
        if flat.len() != self.num_values() {
            return Err(DiffError::Dimension {
                expected: self.num_values(),
                got: flat.len(),
            });
        }
        let mut offset = 0;
        for t in self.tensors.values_mut() {
            let n = t.len();
            t.data_mut().copy_from_slice(&flat[offset..offset + n]);
            offset += n;
        }
        Ok(())
    }

    /// A store with the same names and shapes, all zeros.
    pub fn zeros_like(&self) -> Self {
        Self {
            tensors: self
                .tensors
                .iter()
                .map(|(k, t)| (k.clone(), Tensor::zeros(t.shape())))
                .collect(),
        }
    }

    /// Tensors whose names start with `prefix`, with the prefix removed.
    pub fn strip_prefix(&self, prefix: &str) -> Self {
        Self {
            tensors: self
                .tensors
                .iter()
                .filter_map(|(k, t)| k.strip_prefix(prefix).map(|s| (s.to_string(), t.clone())))
                .collect(),
        }
    }

    /// Copies every tensor of `other` in under `prefix`.
    pub fn extend_prefixed(&mut self, prefix: &str, other: &ParamStore) {
        for (k, t) in &other.tensors {
            self.insert(format!("{prefix}{k}"), t.clone());
        }
    }

    /// Registers every tensor as a differentiable leaf of `graph`.
    pub fn bind<'g>(&self, graph: &'g Graph) -> ParamVars<'g> {
        self.bind_where(graph, |_| true)
    }

    /// Registers tensors as leaves; those rejected by `trainable` become
    /// constants.
    pub fn bind_where<'g>(
        &self,
        graph: &'g Graph,
        trainable: impl Fn(&str) -> bool,
    ) -> ParamVars<'g> {
        let vars = self
            .tensors
            .iter()
            .map(|(name, t)| {
                let var = if trainable(name) {
                    graph.param(t.clone())
                } else {
                    graph.constant(t.clone())
                };
                (name.clone(), var)
            })
            .collect();
        ParamVars { vars }
    }
}

/// Graph handles for every tensor of a [`ParamStore`], in flattening order.
#[derive(Clone, Debug)]
pub struct ParamVars<'g> {
    vars: BTreeMap<String, Var<'g>>,
}

impl<'g> ParamVars<'g> {
    pub fn get(&self, name: &str) -> Var<'g> {
        *self
            .vars
            .get(name)
            .unwrap_or_else(|| panic!("missing parameter {name}"))
    }

    pub fn try_get(&self, name: &str) -> Option<Var<'g>> {
        self.vars.get(name).copied()
    }

    /// All vars in flattening order.
    pub fn all(&self) -> Vec<Var<'g>> {
        self.vars.values().copied().collect()
    }

    /// Vars whose names pass `keep`, in flattening order.
    pub fn select(&self, keep: impl Fn(&str) -> bool) -> Vec<Var<'g>> {
        self.vars
            .iter()
            .filter(|(k, _)| keep(k))
            .map(|(_, v)| *v)
            .collect()
    }

    /// A view of the vars under `prefix`, with the prefix removed.
    pub fn scoped(&self, prefix: &str) -> ParamVars<'g> {
        ParamVars {
            vars: self
                .vars
                .iter()
                .filter_map(|(k, v)| k.strip_prefix(prefix).map(|s| (s.to_string(), *v)))
                .collect(),
        }
    }
}

/// Concatenates the values of a list of vars into one flat vector.
pub fn flatten_values(vars: &[Var<'_>]) -> Vec<f64> {
    let mut out = Vec::new();
    for v in vars {
        out.extend_from_slice(v.value().data());
    }
    out
}

/// Concatenates vars into one flat differentiable vector.
pub fn flatten_vars<'g>(graph: &'g Graph, vars: &[Var<'g>]) -> Var<'g> {
    let pieces: Vec<Var<'g>> = vars
        .iter()
        .map(|v| {
            let n = v.value().len();
            v.reshape(&[n, 1])
        })
        .collect();
    let total: usize = pieces.iter().map(|p| p.shape()[0]).sum();
    let mut offset = 0;
    let mut acc: Option<Var<'g>> = None;
    for p in pieces {
        let rows = p.shape()[0];
        let padded = p.pad_rows(offset, total);
        offset += rows;
        acc = Some(match acc {
            Some(a) => a + padded,
            None => padded,
        });
    }
    match acc {
        Some(a) => a.reshape(&[total]),
        None => graph.constant(Tensor::vector(Vec::new())),
    }
}

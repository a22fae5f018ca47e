use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::graph::{Grads, Graph, Var};
use crate::rng::Rng;
use crate::tensor::{Real, Tensor};

/// Ordered collection of named `f32` parameter tensors.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Params {
    names: Vec<String>,
    tensors: Vec<Tensor<f32>>,
}

impl Params {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, tensor: Tensor<f32>) -> Result<()> {
        let name = name.into();
        if self.names.contains(&name) {
            return Err(Error::invalid("parameter name", format!("duplicate {name}")));
        }
        self.names.push(name);
        self.tensors.push(tensor);
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.names.len()
    }

    pub fn is_empty(&self) -> bool {
        self.names.is_empty()
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn tensors(&self) -> &[Tensor<f32>] {
        &self.tensors
    }

    pub fn tensors_mut(&mut self) -> &mut [Tensor<f32>] {
        &mut self.tensors
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor<f32>)> {
        self.names.iter().map(String::as_str).zip(&self.tensors)
    }

    pub fn position(&self, name: &str) -> Option<usize> {
        self.names.iter().position(|n| n == name)
    }

    pub fn get(&self, name: &str) -> Option<&Tensor<f32>> {
        self.position(name).map(|i| &self.tensors[i])
    }

    /// Total number of scalar parameters.
    pub fn count(&self) -> usize {
        self.tensors.iter().map(Tensor::len).sum()
    }

    pub fn all_finite(&self) -> bool {
        self.tensors.iter().all(Tensor::all_finite)
    }

    /// Same names in the same order with the same shapes.
    pub fn same_layout(&self, other: &Params) -> bool {
        self.names == other.names
            && self
                .tensors
                .iter()
                .zip(&other.tensors)
                .all(|(a, b)| a.shape() == b.shape())
    }

    /// Zero tensors with this layout.
    pub fn zeros_like(&self) -> Params {
        Params {
            names: self.names.clone(),
            tensors: self.tensors.iter().map(|t| Tensor::zeros(t.shape())).collect(),
        }
    }

    /// Places every tensor on `graph` as a leaf.
    pub fn bind<S: Real>(&self, graph: &mut Graph<S>, trainable: bool) -> Bound {
        Bound {
            vars: self.tensors.iter().map(|t| graph.leaf(t.cast(), trainable)).collect(),
        }
    }

    /// Layout-checked copy of `tensors` into a fresh container with these names.
    pub fn with_tensors(&self, tensors: Vec<Tensor<f32>>) -> Result<Params> {
        if tensors.len() != self.tensors.len() {
            return Err(Error::invalid("parameters", "tensor count mismatch"));
        }
        for (a, b) in self.tensors.iter().zip(&tensors) {
            a.ensure_same_shape(b, "with_tensors")?;
        }
        Ok(Params {
            names: self.names.clone(),
            tensors,
        })
    }
}

/// Graph handles for a [`Params`] set, in the same order.
pub struct Bound {
    vars: Vec<Var>,
}

impl Bound {
    /// Wraps leaves created by the caller, one per parameter in order.
    pub fn from_vars(vars: Vec<Var>) -> Self {
        Bound { vars }
    }

    pub fn var(&self, params: &Params, name: &str) -> Var {
        let i = params
            .position(name)
            .unwrap_or_else(|| panic!("unknown parameter {name}"));
        self.vars[i]
    }

    pub fn vars(&self) -> &[Var] {
        &self.vars
    }

    /// Gradients for every bound parameter, zeros where none flowed.
    pub fn gradients<S: Real>(&self, params: &Params, grads: &Grads<S>) -> Params {
        let tensors = self
            .vars
            .iter()
            .zip(params.tensors())
            .map(|(&v, t)| grads.get_or_zeros(v, t.shape()).cast())
            .collect();
        Params {
            names: params.names.clone(),
            tensors,
        }
    }
}

/// Kernel tensor with entries drawn from N(0, 1/fan_in).
pub fn fan_in_normal(rng: &mut Rng, shape: &[usize], fan_in: usize) -> Tensor<f32> {
    let dist = Normal::new(0.0f32, (1.0 / fan_in as f32).sqrt()).expect("positive std");
    let n = shape.iter().product();
    Tensor::from_vec(shape, (0..n).map(|_| dist.sample(rng)).collect()).expect("length matches shape")
}

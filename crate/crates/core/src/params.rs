//! Named trainable tensors and the per-step binding of those tensors into a
//! fresh autodiff graph.

use rand_distr::{Distribution, Normal, Uniform};
use serde::{Deserialize, Serialize};

use crate::autodiff::{Gradients, Graph, Var};
use crate::error::{Error, Result};
use crate::rng::Rng;
use crate::tensor::{Real, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ParamId(pub usize);

#[derive(Clone, Debug)]
pub struct ParamStore<T> {
    names: Vec<String>,
    tensors: Vec<Tensor<T>>,
}

impl<T: Real> Default for ParamStore<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Real> ParamStore<T> {
    pub fn new() -> Self {
        ParamStore {
            names: Vec::new(),
            tensors: Vec::new(),
        }
    }

    pub fn add(&mut self, name: impl Into<String>, t: Tensor<T>) -> ParamId {
        self.names.push(name.into());
        self.tensors.push(t);
        ParamId(self.tensors.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Tensor<T> {
        &self.tensors[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor<T> {
        &mut self.tensors[id.0]
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.names.iter().position(|n| n == name).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &str, &Tensor<T>)> {
        self.names
            .iter()
            .zip(&self.tensors)
            .enumerate()
            .map(|(i, (n, t))| (ParamId(i), n.as_str(), t))
    }

    pub fn tensors(&self) -> &[Tensor<T>] {
        &self.tensors
    }

    pub fn tensors_mut(&mut self) -> &mut [Tensor<T>] {
        &mut self.tensors
    }

    pub fn numel(&self) -> usize {
        self.tensors.iter().map(Tensor::numel).sum()
    }

    pub fn numel_of(&self, ids: &[ParamId]) -> usize {
        ids.iter().map(|&id| self.get(id).numel()).sum()
    }

    pub fn cast<U: Real>(&self) -> ParamStore<U> {
        ParamStore {
            names: self.names.clone(),
            tensors: self.tensors.iter().map(Tensor::cast).collect(),
        }
    }
}

/// Source of initial parameter values. Models declare their parameters
/// through an `Init` so the same construction code serves both fresh
/// initialization and checkpoint loading.
pub trait Init<T: Real> {
    fn tensor(&mut self, name: &str, shape: &[usize], scheme: Scheme) -> Result<Tensor<T>>;
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Scheme {
    /// U(-1/√fan_in, 1/√fan_in), the default for dense layers.
    Uniform { fan_in: usize },
    /// N(0, std²).
    Gaussian { std: f64 },
    Constant(f64),
}

pub struct RandomInit<'r> {
    pub rng: &'r mut Rng,
}

impl<T: Real> Init<T> for RandomInit<'_> {
    fn tensor(&mut self, _name: &str, shape: &[usize], scheme: Scheme) -> Result<Tensor<T>> {
        let n: usize = shape.iter().product();
        let data: Vec<T> = match scheme {
            Scheme::Uniform { fan_in } => {
                let b = 1.0 / (fan_in.max(1) as f64).sqrt();
                let dist = Uniform::new(-b, b).map_err(|e| Error::Param(e.to_string()))?;
                (0..n).map(|_| T::of(dist.sample(self.rng))).collect()
            }
            Scheme::Gaussian { std } => {
                let dist = Normal::new(0.0, std).map_err(|e| Error::Param(e.to_string()))?;
                (0..n).map(|_| T::of(dist.sample(self.rng))).collect()
            }
            Scheme::Constant(c) => vec![T::of(c); n],
        };
        Tensor::new(shape.to_vec(), data)
    }
}

/// Pulls tensors by name from an existing store (checkpoint loading).
pub struct LoadInit<'a, T> {
    pub source: &'a ParamStore<T>,
}

impl<T: Real> Init<T> for LoadInit<'_, T> {
    fn tensor(&mut self, name: &str, shape: &[usize], _scheme: Scheme) -> Result<Tensor<T>> {
        let id = self
            .source
            .find(name)
            .ok_or_else(|| Error::Config(format!("missing tensor `{name}`")))?;
        let t = self.source.get(id);
        if t.shape() != shape {
            return Err(Error::dim("load", t.shape(), shape));
        }
        Ok(t.clone())
    }
}

/// Declares a parameter in `store`, sourcing its value from `init`.
pub fn declare<T: Real>(
    store: &mut ParamStore<T>,
    init: &mut dyn Init<T>,
    name: String,
    shape: &[usize],
    scheme: Scheme,
) -> Result<ParamId> {
    let t = init.tensor(&name, shape, scheme)?;
    Ok(store.add(name, t))
}

/// One forward pass: a fresh graph with every parameter bound as a leaf.
pub struct Ctx<'r, T: Real> {
    pub graph: Graph<T>,
    vars: Vec<Var>,
    pub training: bool,
    pub rng: &'r mut Rng,
}

impl<'r, T: Real> Ctx<'r, T> {
    /// Binds `store` into a new graph. Parameters require gradients iff
    /// `track_grads` is set.
    pub fn new(store: &ParamStore<T>, training: bool, track_grads: bool, rng: &'r mut Rng) -> Self {
        let mut graph = Graph::new();
        let vars = store
            .tensors()
            .iter()
            .map(|t| graph.leaf(t.clone(), track_grads))
            .collect();
        Ctx {
            graph,
            vars,
            training,
            rng,
        }
    }

    pub fn p(&self, id: ParamId) -> Var {
        self.vars[id.0]
    }

    pub fn dropout(&mut self, x: Var, rate: f64) -> Result<Var> {
        self.graph.dropout(x, rate, self.training, self.rng)
    }

    /// Gradients for every parameter, zero where none flowed.
    pub fn param_grads(&self, grads: &Gradients<T>) -> Vec<Tensor<T>> {
        self.vars
            .iter()
            .map(|&v| {
                grads
                    .get(v)
                    .cloned()
                    .unwrap_or_else(|| Tensor::zeros(self.graph.shape(v)))
            })
            .collect()
    }
}

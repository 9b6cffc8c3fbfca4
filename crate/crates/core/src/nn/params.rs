use std::collections::HashMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::tensor::{Graph, ParamId, Real, Tensor, Var};

/// Ordered, named collection of learned tensors.
#[derive(Clone, Debug, PartialEq)]
pub struct ParamSet<T: Real = f32> {
    names: Vec<String>,
    tensors: Vec<Tensor<T>>,
    index: HashMap<String, usize>,
}

impl<T: Real> Default for ParamSet<T> {
    fn default() -> Self {
        Self {
            names: Vec::new(),
            tensors: Vec::new(),
            index: HashMap::new(),
        }
    }
}

impl<T: Real> ParamSet<T> {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, t: Tensor<T>) -> ParamId {
        let name = name.into();
        assert!(
            !self.index.contains_key(&name),
            "duplicate parameter name {name}"
        );
        let id = self.tensors.len();
        self.index.insert(name.clone(), id);
        self.names.push(name);
        self.tensors.push(t);
        ParamId(id)
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
        self.index.get(name).copied().map(ParamId)
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.tensors.len()).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor<T>)> {
        self.names.iter().map(String::as_str).zip(&self.tensors)
    }

    pub fn tensors(&self) -> &[Tensor<T>] {
        &self.tensors
    }

    pub fn tensors_mut(&mut self) -> &mut [Tensor<T>] {
        &mut self.tensors
    }

    pub fn num_scalars(&self) -> usize {
        self.tensors.iter().map(Tensor::len).sum()
    }

    /// Zero tensors shaped like every parameter, for gradient accumulation.
    pub fn zeros_like(&self) -> Vec<Tensor<T>> {
        self.tensors.iter().map(|t| Tensor::zeros(t.shape())).collect()
    }

    /// Leaf node on `g` referencing parameter `id`.
    pub fn var<'p>(&'p self, g: &mut Graph<'p, T>, id: ParamId) -> Var {
        g.param(id, &self.tensors[id.0])
    }

    pub fn cast<U: Real>(&self) -> ParamSet<U> {
        ParamSet {
            names: self.names.clone(),
            tensors: self.tensors.iter().map(Tensor::cast).collect(),
            index: self.index.clone(),
        }
    }

    /// Replace values by name; every parameter must be present with the same shape.
    pub fn load_from(&mut self, named: Vec<(String, Tensor<T>)>) -> Result<()> {
        let mut seen = vec![false; self.tensors.len()];
        for (name, t) in named {
            let id = self
                .find(&name)
                .ok_or_else(|| Error::Format(format!("unexpected parameter `{name}`")))?;
            if self.tensors[id.0].shape() != t.shape() {
                return Err(Error::Format(format!(
                    "parameter `{name}` has shape {:?}, expected {:?}",
                    t.shape(),
                    self.tensors[id.0].shape()
                )));
            }
            self.tensors[id.0] = t;
            seen[id.0] = true;
        }
        if let Some(i) = seen.iter().position(|s| !s) {
            return Err(Error::Format(format!("missing parameter `{}`", self.names[i])));
        }
        Ok(())
    }
}

/// Seeded parameter initialisation.
pub struct Initializer {
    rng: ChaCha8Rng,
}

impl Initializer {
    pub fn new(seed: u64) -> Self {
        Self {
            rng: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    /// Uniform in `±1/sqrt(fan_in)` for an `in x out` projection.
    pub fn fan_in(&mut self, fan_in: usize, fan_out: usize) -> Tensor<f32> {
        let bound = 1.0 / (fan_in as f32).sqrt();
        let data = (0..fan_in * fan_out)
            .map(|_| self.rng.random_range(-bound..bound))
            .collect();
        Tensor::new(vec![fan_in, fan_out], data).unwrap()
    }

    /// Normal(0, std) table, used for embeddings.
    pub fn normal(&mut self, rows: usize, cols: usize, std: f32) -> Tensor<f32> {
        let dist = Normal::new(0.0f32, std).expect("valid std");
        let data = (0..rows * cols).map(|_| dist.sample(&mut self.rng)).collect();
        Tensor::new(vec![rows, cols], data).unwrap()
    }
}

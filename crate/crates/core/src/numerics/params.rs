use indexmap::IndexMap;
use serde::{Deserialize, Serialize};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::Tensor;
use crate::error::{Error, Result};

/// Half-width of the fixed-range uniform initializer.
pub const INIT_RANGE: f64 = 0.05;

/// How [`ParameterStore::init_uniform`] picks its range.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum InitScheme {
    /// `sqrt(6 / (fan_in + fan_out))`, with `fan_out` the last axis and
    /// `fan_in` the product of the others.
    #[default]
    Glorot,
    /// `INIT_RANGE` for every weight.
    Fixed,
}

impl InitScheme {
    pub fn range(self, shape: &[usize]) -> f64 {
        match self {
            InitScheme::Fixed => INIT_RANGE,
            InitScheme::Glorot => {
                let fan_out = *shape.last().unwrap_or(&1);
                let fan_in = shape.iter().product::<usize>() / fan_out.max(1);
                (6.0 / (fan_in + fan_out).max(1) as f64).sqrt()
            }
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Parameter {
    pub id: String,
    pub value: Tensor,
    pub grad: Tensor,
}

impl Parameter {
    pub fn new(id: impl Into<String>, value: Tensor) -> Self {
        let grad = Tensor::zeros(value.shape());
        Self {
            id: id.into(),
            value,
            grad,
        }
    }
}

/// Insertion-ordered parameter collection with a seeded initializer.
#[derive(Clone, Debug)]
pub struct ParameterStore {
    params: IndexMap<String, Parameter>,
    rng_seed: u64,
    rng: ChaCha8Rng,
    scheme: InitScheme,
}

impl PartialEq for ParameterStore {
    fn eq(&self, other: &Self) -> bool {
        self.params == other.params
    }
}

impl ParameterStore {
    pub fn new(rng_seed: u64) -> Self {
        Self {
            params: IndexMap::new(),
            rng_seed,
            rng: ChaCha8Rng::seed_from_u64(rng_seed),
            scheme: InitScheme::default(),
        }
    }

    pub fn seed(&self) -> u64 {
        self.rng_seed
    }

    pub fn insert(&mut self, id: &str, value: Tensor) -> Result<()> {
        if self.params.contains_key(id) {
            return Err(Error::DuplicateParam(id.to_string()));
        }
        self.params.insert(id.to_string(), Parameter::new(id, value));
        Ok(())
    }

    pub fn scheme(&self) -> InitScheme {
        self.scheme
    }

    pub fn set_scheme(&mut self, scheme: InitScheme) {
        self.scheme = scheme;
    }

    /// Weight drawn uniformly from `[-r, r]`, `r` set by the store's scheme.
    pub fn init_uniform(&mut self, id: &str, shape: &[usize]) -> Result<()> {
        let numel: usize = shape.iter().product();
        let r = self.scheme.range(shape);
        let data = (0..numel).map(|_| self.rng.gen_range(-r..=r)).collect();
        self.insert(id, Tensor::new(shape.to_vec(), data)?)
    }

    pub fn init_zeros(&mut self, id: &str, shape: &[usize]) -> Result<()> {
        self.insert(id, Tensor::zeros(shape))
    }

    pub fn init_const(&mut self, id: &str, shape: &[usize], value: f64) -> Result<()> {
        self.insert(id, Tensor::full(shape, value))
    }

    pub fn get(&self, id: &str) -> Result<&Parameter> {
        self.params
            .get(id)
            .ok_or_else(|| Error::UnknownParam(id.to_string()))
    }

    pub fn get_mut(&mut self, id: &str) -> Result<&mut Parameter> {
        self.params
            .get_mut(id)
            .ok_or_else(|| Error::UnknownParam(id.to_string()))
    }

    pub fn value(&self, id: &str) -> Result<&Tensor> {
        Ok(&self.get(id)?.value)
    }

    pub fn set_value(&mut self, id: &str, value: Tensor) -> Result<()> {
        let p = self.get_mut(id)?;
        if p.value.shape() != value.shape() {
            return Err(Error::Dimension {
                op: "set_value",
                lhs: p.value.shape().to_vec(),
                rhs: value.shape().to_vec(),
            });
        }
        p.value = value;
        Ok(())
    }

    pub fn contains(&self, id: &str) -> bool {
        self.params.contains_key(id)
    }

    pub fn iter(&self) -> impl Iterator<Item = &Parameter> {
        self.params.values()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = &mut Parameter> {
        self.params.values_mut()
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    /// Total number of scalar entries across all parameters.
    pub fn num_scalars(&self) -> usize {
        self.params.values().map(|p| p.value.numel()).sum()
    }

    /// Position of `id` in insertion order.
    pub fn index_of(&self, id: &str) -> Result<usize> {
        self.params
            .get_index_of(id)
            .ok_or_else(|| Error::UnknownParam(id.to_string()))
    }

    /// Adds `scale * grad` into the parameter at `index`.
    pub fn add_grad_at(&mut self, index: usize, grad: &[f64], scale: f64) -> Result<()> {
        let bound = self.params.len();
        let (_, p) = self.params.get_index_mut(index).ok_or(Error::Index {
            what: "parameter",
            index,
            bound,
        })?;
        if p.grad.numel() != grad.len() {
            return Err(Error::Dimension {
                op: "add_grad_at",
                lhs: p.grad.shape().to_vec(),
                rhs: vec![grad.len()],
            });
        }
        for (g, &o) in p.grad.data_mut().iter_mut().zip(grad) {
            *g += scale * o;
        }
        Ok(())
    }

    pub fn zero_grads(&mut self) {
        for p in self.params.values_mut() {
            p.grad.data_mut().iter_mut().for_each(|g| *g = 0.0);
        }
    }

    /// Adds `scale * other.grad` into this store's grads, matching by id.
    pub fn add_grads_from(&mut self, other: &ParameterStore, scale: f64) -> Result<()> {
        for p in other.params.values() {
            let mine = self.get_mut(&p.id)?;
            for (g, &o) in mine.grad.data_mut().iter_mut().zip(p.grad.data()) {
                *g += scale * o;
            }
        }
        Ok(())
    }
}

use std::collections::BTreeMap;

use rand_core::RngCore;

use crate::error::{Error, Result};
use crate::rng::uniform;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Index of a parameter inside a [`ParamStore`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub(crate) usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// A named trainable tensor.
#[derive(Debug, Clone, PartialEq)]
pub struct Param<S> {
    pub name: String,
    pub tensor: Tensor<S>,
    /// Must stay elementwise nonnegative (input-convex hidden-to-hidden weights).
    pub constrained: bool,
}

/// Ordered collection of named parameters. Insertion order is the canonical
/// order used by optimizers and checkpoints.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParamStore<S> {
    params: Vec<Param<S>>,
    index: BTreeMap<String, usize>,
}

impl<S: Scalar> ParamStore<S> {
    pub fn new() -> Self {
        Self { params: Vec::new(), index: BTreeMap::new() }
    }

    pub fn insert(&mut self, name: &str, tensor: Tensor<S>, constrained: bool) -> Result<ParamId> {
        if self.index.contains_key(name) {
            return Err(Error::Config(format!("duplicate parameter name {name:?}")));
        }
        let id = self.params.len();
        self.params.push(Param { name: name.to_string(), tensor, constrained });
        self.index.insert(name.to_string(), id);
        Ok(ParamId(id))
    }

    /// Dense weight `[fan_in × fan_out]` drawn from Uniform(±1/√fan_in).
    pub fn init_dense(&mut self, name: &str, fan_in: usize, fan_out: usize, rng: &mut impl RngCore) -> Result<ParamId> {
        let bound = 1.0 / (fan_in as f64).sqrt();
        let data = (0..fan_in * fan_out).map(|_| S::from_f64_lossy(uniform(rng, -bound, bound))).collect();
        self.insert(name, Tensor::new(vec![fan_in, fan_out], data)?, false)
    }

    /// Nonnegative weight initialised to `0.1·|Uniform(±1/√fan_in)|` so it starts feasible.
    pub fn init_nonnegative(
        &mut self,
        name: &str,
        fan_in: usize,
        fan_out: usize,
        rng: &mut impl RngCore,
    ) -> Result<ParamId> {
        let bound = 1.0 / (fan_in as f64).sqrt();
        let data = (0..fan_in * fan_out).map(|_| S::from_f64_lossy(0.1 * uniform(rng, -bound, bound).abs())).collect();
        self.insert(name, Tensor::new(vec![fan_in, fan_out], data)?, true)
    }

    /// Bias vector drawn from Uniform(±1/√fan_in).
    pub fn init_bias(&mut self, name: &str, fan_in: usize, width: usize, rng: &mut impl RngCore) -> Result<ParamId> {
        let bound = 1.0 / (fan_in as f64).sqrt();
        let data = (0..width).map(|_| S::from_f64_lossy(uniform(rng, -bound, bound))).collect();
        self.insert(name, Tensor::new(vec![width], data)?, false)
    }

    pub fn id(&self, name: &str) -> Result<ParamId> {
        self.index.get(name).map(|&i| ParamId(i)).ok_or_else(|| Error::Config(format!("missing parameter {name:?}")))
    }

    /// Looks up `name` and checks its shape.
    pub fn expect(&self, name: &str, dims: &[usize]) -> Result<ParamId> {
        let id = self.id(name)?;
        let got = self.params[id.0].tensor.dims();
        if got != dims {
            return Err(Error::Config(format!("parameter {name:?} has dims {got:?}, configuration requires {dims:?}")));
        }
        Ok(id)
    }

    pub fn get(&self, id: ParamId) -> &Tensor<S> {
        &self.params[id.0].tensor
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor<S> {
        &mut self.params[id.0].tensor
    }

    pub fn param(&self, id: ParamId) -> &Param<S> {
        &self.params[id.0]
    }

    pub fn by_name(&self, name: &str) -> Option<&Tensor<S>> {
        self.index.get(name).map(|&i| &self.params[i].tensor)
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = &Param<S>> {
        self.params.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = &mut Param<S>> {
        self.params.iter_mut()
    }

    /// Total number of scalar parameters.
    pub fn scalar_count(&self) -> usize {
        self.params.iter().map(|p| p.tensor.len()).sum()
    }

    pub fn cast<T: Scalar>(&self) -> ParamStore<T> {
        ParamStore {
            params: self
                .params
                .iter()
                .map(|p| Param { name: p.name.clone(), tensor: p.tensor.cast(), constrained: p.constrained })
                .collect(),
            index: self.index.clone(),
        }
    }

    /// Smallest value over all constrained parameters, if any exist.
    pub fn min_constrained(&self) -> Option<S> {
        self.params
            .iter()
            .filter(|p| p.constrained)
            .flat_map(|p| p.tensor.data().iter().copied())
            .fold(None, |acc, v| Some(acc.map_or(v, |a: S| a.min(v))))
    }
}

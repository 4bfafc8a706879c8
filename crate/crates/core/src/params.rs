//! Named model parameters with gradient slots.
//!
//! Every learnable tensor lives here under a unique dotted path
//! (e.g. `lrp.lanet0.conv1.weight`). The name set is the checkpoint
//! contract: save/load round-trips preserve it exactly.

use crate::error::{Error, Result};
use crate::tensor::{normal, uniform, Real, Tensor};
use rand_chacha::ChaCha8Rng;
use std::collections::HashMap;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct ParamId(pub(crate) usize);

/// Initialization scheme for a freshly registered parameter.
#[derive(Debug, Clone, Copy)]
pub enum Init {
    /// He-style fan-in-scaled uniform in [-sqrt(6/fan_in), sqrt(6/fan_in)),
    /// which keeps activation variance stable through relu stacks.
    FanInUniform { fan_in: usize },
    Zeros,
    /// Gaussian with the given std (used for learned tokens).
    Normal { std: f64 },
}

#[derive(Debug, Clone)]
pub struct Param<T> {
    pub name: String,
    pub value: Tensor<T>,
    pub grad: Vec<T>,
}

/// Ordered store of parameters. Registration order is fixed by model
/// construction, which makes initialization deterministic for a seed.
#[derive(Debug, Clone)]
pub struct ParamStore<T> {
    params: Vec<Param<T>>,
    by_name: HashMap<String, ParamId>,
}

impl<T: Real> ParamStore<T> {
    pub fn new() -> Self {
        ParamStore {
            params: Vec::new(),
            by_name: HashMap::new(),
        }
    }

    /// Register a parameter, drawing its initial value from `rng`.
    pub fn register(
        &mut self,
        name: &str,
        shape: Vec<usize>,
        init: Init,
        rng: &mut ChaCha8Rng,
    ) -> Result<ParamId> {
        if self.by_name.contains_key(name) {
            return Err(Error::Config(format!("duplicate parameter name `{name}`")));
        }
        let numel: usize = shape.iter().product();
        let data: Vec<T> = match init {
            Init::FanInUniform { fan_in } => {
                let bound = (6.0 / fan_in.max(1) as f64).sqrt();
                (0..numel).map(|_| uniform(rng, bound)).collect()
            }
            Init::Zeros => vec![T::zero(); numel],
            Init::Normal { std } => (0..numel).map(|_| normal(rng, std)).collect(),
        };
        let id = ParamId(self.params.len());
        self.params.push(Param {
            name: name.to_string(),
            value: Tensor::from_parts(shape, data),
            grad: vec![T::zero(); numel],
        });
        self.by_name.insert(name.to_string(), id);
        Ok(id)
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Param<T> {
        &self.params[id.0]
    }

    pub fn lookup(&self, name: &str) -> Option<ParamId> {
        self.by_name.get(name).copied()
    }

    pub fn value(&self, id: ParamId) -> &Tensor<T> {
        &self.params[id.0].value
    }

    pub fn set_value(&mut self, id: ParamId, value: Tensor<T>) -> Result<()> {
        let p = &mut self.params[id.0];
        if p.value.shape() != value.shape() {
            return Err(Error::ShapeMismatch {
                op: "set_value",
                lhs: p.value.shape().to_vec(),
                rhs: value.shape().to_vec(),
            });
        }
        p.value = value;
        Ok(())
    }

    pub fn grad(&self, id: ParamId) -> &[T] {
        &self.params[id.0].grad
    }

    pub(crate) fn accumulate_grad(&mut self, id: ParamId, delta: &[T], scale: T) {
        let g = &mut self.params[id.0].grad;
        debug_assert_eq!(g.len(), delta.len());
        for (gi, di) in g.iter_mut().zip(delta) {
            *gi = *gi + *di * scale;
        }
    }

    pub fn zero_grads(&mut self) {
        for p in &mut self.params {
            p.grad.iter_mut().for_each(|g| *g = T::zero());
        }
    }

    /// Total number of scalar parameters.
    pub fn num_scalars(&self) -> usize {
        self.params.iter().map(|p| p.value.numel()).sum()
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Param<T>)> {
        self.params.iter().enumerate().map(|(i, p)| (ParamId(i), p))
    }

    /// Flatten all parameter values into one vector (registration order).
    pub fn flatten_values(&self) -> Vec<T> {
        let mut out = Vec::with_capacity(self.num_scalars());
        for p in &self.params {
            out.extend_from_slice(p.value.data());
        }
        out
    }

    /// Flatten all gradients into one vector (registration order).
    pub fn flatten_grads(&self) -> Vec<T> {
        let mut out = Vec::with_capacity(self.num_scalars());
        for p in &self.params {
            out.extend_from_slice(&p.grad);
        }
        out
    }

    /// Overwrite all values from one flat vector (registration order).
    pub fn unflatten_values(&mut self, flat: &[T]) -> Result<()> {
        if flat.len() != self.num_scalars() {
            return Err(Error::ShapeMismatch {
                op: "unflatten_values",
                lhs: vec![self.num_scalars()],
                rhs: vec![flat.len()],
            });
        }
        let mut off = 0;
        for p in &mut self.params {
            let n = p.value.numel();
            p.value.data_mut().copy_from_slice(&flat[off..off + n]);
            off += n;
        }
        Ok(())
    }
}

impl<T: Real> Default for ParamStore<T> {
    fn default() -> Self {
        Self::new()
    }
}

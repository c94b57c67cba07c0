use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{shape_err, NnError, Result};
use crate::real::Real;
use crate::tensor::Tensor;

/// Named, shaped parameters. Names are dot-separated paths; batch
/// normalization running statistics are stored alongside as buffers.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelParams<T> {
    tensors: BTreeMap<String, Tensor<T>>,
    pub rng_seed: u64,
}

/// Running statistics are state, not trainable parameters.
pub fn is_buffer(name: &str) -> bool {
    name.ends_with(".running_mean") || name.ends_with(".running_var")
}

impl<T: Real> ModelParams<T> {
    pub fn new(rng_seed: u64) -> Self {
        Self {
            tensors: BTreeMap::new(),
            rng_seed,
        }
    }

    pub fn insert(&mut self, name: impl Into<String>, t: Tensor<T>) -> Result<()> {
        let name = name.into();
        if self.tensors.contains_key(&name) {
            return Err(NnError::DuplicateParam(name));
        }
        self.tensors.insert(name, t);
        Ok(())
    }

    /// Overwrites an existing tensor of the same shape.
    pub fn replace(&mut self, name: &str, t: Tensor<T>) -> Result<()> {
        let slot = self
            .tensors
            .get_mut(name)
            .ok_or_else(|| NnError::MissingParam(name.to_string()))?;
        if slot.shape() != t.shape() {
            return Err(shape_err(
                "replace",
                format!("{name}: {:?} vs {:?}", slot.shape(), t.shape()),
            ));
        }
        *slot = t;
        Ok(())
    }

    pub fn get(&self, name: &str) -> Result<&Tensor<T>> {
        self.tensors
            .get(name)
            .ok_or_else(|| NnError::MissingParam(name.to_string()))
    }

    pub fn get_mut(&mut self, name: &str) -> Result<&mut Tensor<T>> {
        self.tensors
            .get_mut(name)
            .ok_or_else(|| NnError::MissingParam(name.to_string()))
    }

    pub fn contains(&self, name: &str) -> bool {
        self.tensors.contains_key(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor<T>)> {
        self.tensors.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.tensors.keys().map(String::as_str)
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    /// Number of trainable scalars.
    pub fn num_trainable(&self) -> usize {
        self.iter()
            .filter(|(n, _)| !is_buffer(n))
            .map(|(_, t)| t.len())
            .sum()
    }

    pub fn all_finite(&self) -> bool {
        self.tensors.values().all(Tensor::all_finite)
    }

    pub fn cast<U: Real>(&self) -> ModelParams<U> {
        ModelParams {
            tensors: self
                .tensors
                .iter()
                .map(|(k, v)| (k.clone(), v.cast()))
                .collect(),
            rng_seed: self.rng_seed,
        }
    }

    /// Copies every tensor of `other` whose name starts with `prefix`.
    pub fn copy_from(&mut self, other: &ModelParams<T>, prefix: &str) -> Result<usize> {
        let mut copied = 0;
        for (name, t) in other.iter().filter(|(n, _)| n.starts_with(prefix)) {
            self.replace(name, t.clone())?;
            copied += 1;
        }
        Ok(copied)
    }
}

/// Deterministic initializer. Weights are uniform in ±1/√fan_in, biases
/// and shifts zero, gains one.
pub struct ParamInit<'a, T> {
    params: &'a mut ModelParams<T>,
    rng: ChaCha8Rng,
}

impl<'a, T: Real> ParamInit<'a, T> {
    pub fn new(params: &'a mut ModelParams<T>) -> Self {
        let rng = ChaCha8Rng::seed_from_u64(params.rng_seed);
        Self { params, rng }
    }

    pub fn with_stream(params: &'a mut ModelParams<T>, stream: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(params.rng_seed);
        rng.set_stream(stream);
        Self { params, rng }
    }

    fn weight(&mut self, name: String, fan_in: usize, fan_out: usize) -> Result<()> {
        let bound = 1.0 / (fan_in.max(1) as f64).sqrt();
        let data = (0..fan_in * fan_out)
            .map(|_| T::lit(self.rng.random_range(-bound..bound)))
            .collect();
        self.params.insert(name, Tensor::matrix(fan_in, fan_out, data)?)
    }

    /// `{prefix}.weight` (in × out) and `{prefix}.bias`.
    pub fn linear(&mut self, prefix: &str, fan_in: usize, fan_out: usize) -> Result<()> {
        self.weight(format!("{prefix}.weight"), fan_in, fan_out)?;
        self.params
            .insert(format!("{prefix}.bias"), Tensor::zeros(&[fan_out]))
    }

    pub fn linear_no_bias(&mut self, prefix: &str, fan_in: usize, fan_out: usize) -> Result<()> {
        self.weight(format!("{prefix}.weight"), fan_in, fan_out)
    }

    pub fn batch_norm(&mut self, prefix: &str, c: usize) -> Result<()> {
        self.layer_norm(prefix, c)?;
        self.params
            .insert(format!("{prefix}.running_mean"), Tensor::zeros(&[c]))?;
        self.params
            .insert(format!("{prefix}.running_var"), Tensor::filled(&[c], T::one()))
    }

    pub fn layer_norm(&mut self, prefix: &str, c: usize) -> Result<()> {
        self.params
            .insert(format!("{prefix}.gamma"), Tensor::filled(&[c], T::one()))?;
        self.params.insert(format!("{prefix}.beta"), Tensor::zeros(&[c]))
    }

    /// Linear, batch norm, rectifier.
    pub fn fcn(&mut self, prefix: &str, fan_in: usize, fan_out: usize) -> Result<()> {
        self.linear(&format!("{prefix}.fc"), fan_in, fan_out)?;
        self.batch_norm(&format!("{prefix}.bn"), fan_out)
    }

    pub fn mlp(&mut self, prefix: &str, fan_in: usize, hidden: usize, fan_out: usize) -> Result<()> {
        self.linear(&format!("{prefix}.fc1"), fan_in, hidden)?;
        self.linear(&format!("{prefix}.fc2"), hidden, fan_out)
    }

    pub fn attention(&mut self, prefix: &str, c: usize) -> Result<()> {
        for p in ["q", "k", "v"] {
            self.linear(&format!("{prefix}.{p}"), c, c)?;
        }
        self.linear_no_bias(&format!("{prefix}.o"), c, c)
    }
}

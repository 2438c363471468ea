use std::collections::HashMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Result, TensorError};
use crate::real::Real;
use crate::tensor::{numel, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Parameter<T> {
    /// Dotted path, unique within a store.
    pub name: String,
    pub tensor: Tensor<T>,
    /// Buffers (e.g. batch-norm running moments) are stored but not optimized.
    pub trainable: bool,
}

#[derive(Clone, Copy, Debug)]
pub enum Init {
    Zeros,
    Ones,
    Constant(f64),
    /// Normal truncated at two standard deviations.
    TruncNormal {
        std: f64,
    },
    /// Uniform on `±sqrt(3 / fan_in)`.
    FanInUniform {
        fan_in: usize,
    },
    /// Explicit values, e.g. a deterministic spread across channels.
    Values(fn(usize, usize) -> f64),
}

/// FNV-1a, used to derive a per-parameter seed from its name so that adding
/// or removing modules does not shift the initialization of the others.
fn name_hash(name: &str) -> u64 {
    name.bytes().fold(0xcbf2_9ce4_8422_2325u64, |h, b| {
        (h ^ b as u64).wrapping_mul(0x0000_0100_0000_01b3)
    })
}

impl Init {
    pub fn sample(self, shape: &[usize], seed: u64, name: &str) -> Vec<f64> {
        let n = numel(shape);
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ name_hash(name));
        match self {
            Init::Zeros => vec![0.0; n],
            Init::Ones => vec![1.0; n],
            Init::Constant(v) => vec![v; n],
            Init::TruncNormal { std } => {
                let dist = Normal::new(0.0, std).expect("positive std");
                (0..n)
                    .map(|_| loop {
                        let v: f64 = dist.sample(&mut rng);
                        if v.abs() <= 2.0 * std {
                            break v;
                        }
                    })
                    .collect()
            }
            Init::FanInUniform { fan_in } => {
                let bound = (3.0 / fan_in.max(1) as f64).sqrt();
                (0..n).map(|_| rng.random_range(-bound..bound)).collect()
            }
            Init::Values(f) => (0..n).map(|i| f(i, n)).collect(),
        }
    }
}

#[derive(Clone, Debug, Default)]
pub struct ParamStore<T> {
    params: Vec<Parameter<T>>,
    by_name: HashMap<String, ParamId>,
}

impl<T: Real> ParamStore<T> {
    pub fn new() -> Self {
        Self {
            params: Vec::new(),
            by_name: HashMap::new(),
        }
    }

    pub fn insert(&mut self, name: &str, tensor: Tensor<T>, trainable: bool) -> Result<ParamId> {
        if self.by_name.contains_key(name) {
            return Err(TensorError::DuplicateParameter(name.to_string()));
        }
        let id = ParamId(self.params.len());
        self.params.push(Parameter {
            name: name.to_string(),
            tensor,
            trainable,
        });
        self.by_name.insert(name.to_string(), id);
        Ok(id)
    }

    /// Adds a trainable parameter initialized deterministically from
    /// `(seed, name)`.
    pub fn init(&mut self, name: &str, shape: &[usize], init: Init, seed: u64) -> Result<ParamId> {
        let t = Tensor::from_f64(shape, &init.sample(shape, seed, name))?;
        self.insert(name, t, true)
    }

    pub fn buffer(&mut self, name: &str, shape: &[usize], value: f64) -> Result<ParamId> {
        self.insert(name, Tensor::full(shape, T::of(value)), false)
    }

    pub fn get(&self, id: ParamId) -> &Parameter<T> {
        &self.params[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Parameter<T> {
        &mut self.params[id.0]
    }

    pub fn id(&self, name: &str) -> Result<ParamId> {
        self.by_name
            .get(name)
            .copied()
            .ok_or_else(|| TensorError::UnknownParameter(name.to_string()))
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Parameter<T>)> {
        self.params.iter().enumerate().map(|(i, p)| (ParamId(i), p))
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    /// Number of trainable scalars.
    pub fn trainable_count(&self) -> usize {
        self.params
            .iter()
            .filter(|p| p.trainable)
            .map(|p| p.tensor.len())
            .sum()
    }

    pub fn cast<U: Real>(&self) -> ParamStore<U> {
        ParamStore {
            params: self
                .params
                .iter()
                .map(|p| Parameter {
                    name: p.name.clone(),
                    tensor: p.tensor.cast(),
                    trainable: p.trainable,
                })
                .collect(),
            by_name: self.by_name.clone(),
        }
    }
}

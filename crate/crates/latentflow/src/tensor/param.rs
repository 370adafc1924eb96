//! Named parameter tensors. Initialization is a pure function of
//! (initializer, seed, name), so registration order never changes values,
//! and the sorted map makes iteration and serialization order stable.

use std::collections::BTreeMap;

use super::graph::{Graph, NodeId};
use super::rng::Rng;
use super::{numel, Element, Tensor, TensorError};

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Init {
    /// Uniform in ±sqrt(6 / fan_in).
    KaimingUniform { fan_in: usize },
    /// Uniform in ±gain·sqrt(6 / fan_in). Same stream as KaimingUniform,
    /// so gain 1 reproduces it exactly.
    ScaledKaimingUniform { fan_in: usize, gain: f64 },
    /// Zero-mean gaussian with the given standard deviation.
    Normal { std: f64 },
    Zeros,
    Ones,
}

impl Init {
    fn materialize<T: Element>(self, shape: &[usize], seed: u64, name: &str) -> Tensor<T> {
        let n = numel(shape);
        let mut rng = Rng::for_name(seed, name);
        let data: Vec<T> = match self {
            Init::KaimingUniform { fan_in } => {
                let bound = (6.0 / fan_in.max(1) as f64).sqrt();
                (0..n).map(|_| T::from_f64(rng.uniform_in(-bound, bound))).collect()
            }
            Init::ScaledKaimingUniform { fan_in, gain } => {
                let bound = gain * (6.0 / fan_in.max(1) as f64).sqrt();
                (0..n).map(|_| T::from_f64(rng.uniform_in(-bound, bound))).collect()
            }
            Init::Normal { std } => (0..n).map(|_| T::from_f64(rng.normal() * std)).collect(),
            Init::Zeros => vec![T::zero(); n],
            Init::Ones => vec![T::one(); n],
        };
        Tensor::from_vec(shape, data).expect("init volume")
    }
}

/// Node handles for one staging of the parameters into a graph.
pub struct Bindings {
    ids: BTreeMap<String, NodeId>,
}

impl Bindings {
    pub fn id(&self, name: &str) -> Result<NodeId, TensorError> {
        self.ids
            .get(name)
            .copied()
            .ok_or_else(|| TensorError::UnknownParam { name: name.to_string() })
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, NodeId)> {
        self.ids.iter().map(|(n, &id)| (n.as_str(), id))
    }
}

pub struct ParamStore<T: Element> {
    seed: u64,
    params: BTreeMap<String, Tensor<T>>,
}

impl<T: Element> ParamStore<T> {
    pub fn new(seed: u64) -> Self {
        ParamStore { seed, params: BTreeMap::new() }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    /// Creates and initializes a parameter. Names must be unique.
    pub fn register(&mut self, name: &str, shape: &[usize], init: Init) -> Result<(), TensorError> {
        if self.params.contains_key(name) {
            return Err(TensorError::DuplicateParam { name: name.to_string() });
        }
        let t = init.materialize(shape, self.seed, name);
        self.params.insert(name.to_string(), t);
        Ok(())
    }

    pub fn get(&self, name: &str) -> Result<&Tensor<T>, TensorError> {
        self.params
            .get(name)
            .ok_or_else(|| TensorError::UnknownParam { name: name.to_string() })
    }

    pub fn get_mut(&mut self, name: &str) -> Result<&mut Tensor<T>, TensorError> {
        self.params
            .get_mut(name)
            .ok_or_else(|| TensorError::UnknownParam { name: name.to_string() })
    }

    /// Replaces a parameter's values; the shape must match the registration.
    pub fn set(&mut self, name: &str, value: Tensor<T>) -> Result<(), TensorError> {
        let slot = self
            .params
            .get_mut(name)
            .ok_or_else(|| TensorError::UnknownParam { name: name.to_string() })?;
        if slot.shape() != value.shape() {
            return Err(TensorError::ShapeMismatch {
                op: "param set",
                lhs: slot.shape().to_vec(),
                rhs: value.shape().to_vec(),
            });
        }
        *slot = value;
        Ok(())
    }

    /// Sorted by name.
    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.params.keys().map(|s| s.as_str())
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor<T>)> {
        self.params.iter().map(|(n, t)| (n.as_str(), t))
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn num_values(&self) -> usize {
        self.params.values().map(|t| t.numel()).sum()
    }

    /// Inserts every parameter into the graph as a differentiable leaf.
    pub fn stage(&self, graph: &mut Graph<T>) -> Bindings {
        let ids = self
            .params
            .iter()
            .map(|(name, t)| (name.clone(), graph.leaf(t.clone())))
            .collect();
        Bindings { ids }
    }

    pub fn cast<U: Element>(&self) -> ParamStore<U> {
        ParamStore {
            seed: self.seed,
            params: self.params.iter().map(|(n, t)| (n.clone(), t.cast::<U>())).collect(),
        }
    }
}

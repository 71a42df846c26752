use std::sync::Arc;

use indexmap::IndexMap;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::params::TrainablePolicy;
use super::spec::{GraphSpec, WeightRole, WeightSpec};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Clone, Debug)]
pub struct WeightEntry {
    pub tensor: Arc<Tensor>,
    pub trainable: bool,
}

/// Named weights in graph (topological) order.
#[derive(Clone, Debug, Default)]
pub struct WeightStore {
    entries: IndexMap<String, WeightEntry>,
}

impl PartialEq for WeightStore {
    fn eq(&self, other: &Self) -> bool {
        self.entries.len() == other.entries.len()
            && self.entries.iter().zip(&other.entries).all(|((a, x), (b, y))| {
                a == b && x.trainable == y.trainable && x.tensor == y.tensor
            })
    }
}

impl WeightStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, tensor: Tensor, trainable: bool) {
        self.entries.insert(
            name.into(),
            WeightEntry {
                tensor: Arc::new(tensor),
                trainable,
            },
        );
    }

    pub fn get(&self, name: &str) -> Result<&Arc<Tensor>> {
        self.entries
            .get(name)
            .map(|e| &e.tensor)
            .ok_or_else(|| Error::MissingWeight(name.to_string()))
    }

    pub fn entry(&self, name: &str) -> Option<&WeightEntry> {
        self.entries.get(name)
    }

    /// Mutable access for the optimizer; clones the tensor if a tape still
    /// holds a reference to it.
    pub fn tensor_mut(&mut self, name: &str) -> Result<&mut Tensor> {
        self.entries
            .get_mut(name)
            .map(|e| Arc::make_mut(&mut e.tensor))
            .ok_or_else(|| Error::MissingWeight(name.to_string()))
    }

    pub fn is_trainable(&self, name: &str) -> bool {
        self.entries.get(name).is_some_and(|e| e.trainable)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &WeightEntry)> {
        self.entries.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.entries.keys().map(String::as_str)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn numel(&self) -> usize {
        self.entries.values().map(|e| e.tensor.len()).sum()
    }

    /// Retag every entry under `policy`.
    pub fn apply_policy(&mut self, graph: &GraphSpec, policy: TrainablePolicy) {
        for layer in graph.layers() {
            for w in &layer.weights {
                if let Some(e) = self.entries.get_mut(&w.name) {
                    e.trainable = policy.is_trainable(w, layer.in_head());
                }
            }
        }
    }

    /// Check that the store binds exactly the graph's weights with matching shapes.
    pub fn validate(&self, graph: &GraphSpec) -> Result<()> {
        for w in graph.weight_specs() {
            let t = self.get(&w.name)?;
            if t.shape() != w.shape.as_slice() {
                return Err(Error::WeightShape {
                    name: w.name.clone(),
                    expected: w.shape.clone(),
                    found: t.shape().to_vec(),
                });
            }
        }
        if self.entries.len() != graph.weight_specs().count() {
            let known: std::collections::HashSet<&str> =
                graph.weight_specs().map(|w| w.name.as_str()).collect();
            if let Some(extra) = self.names().find(|n| !known.contains(n)) {
                return Err(Error::ExtraWeight(extra.to_string()));
            }
        }
        Ok(())
    }
}

fn fans(spec: &WeightSpec) -> (usize, usize) {
    match spec.shape.as_slice() {
        [kh, kw, c, f] => (kh * kw * c, kh * kw * f),
        [d, u] => (*d, *u),
        other => (other.iter().product(), other.iter().product()),
    }
}

/// Glorot-uniform bound `sqrt(6 / (fan_in + fan_out))` for a kernel.
pub fn glorot_limit(spec: &WeightSpec) -> f64 {
    let (fan_in, fan_out) = fans(spec);
    (6.0 / (fan_in + fan_out) as f64).sqrt()
}

/// Kernels Glorot-uniform, biases and betas zero, moving means zero, moving
/// variances one. Tags follow the full fine-tuning policy.
pub fn init_random(graph: &GraphSpec, seed: u64) -> WeightStore {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut store = WeightStore::new();
    for layer in graph.layers() {
        for w in &layer.weights {
            let tensor = match w.role {
                WeightRole::Kernel => {
                    let limit = glorot_limit(w) as f32;
                    Tensor::from_fn(&w.shape, |_| rng.random_range(-limit..=limit))
                }
                WeightRole::MovingVar => Tensor::ones(&w.shape),
                WeightRole::Bias | WeightRole::Beta | WeightRole::MovingMean => {
                    Tensor::zeros(&w.shape)
                }
            };
            let trainable = TrainablePolicy::FullFinetune.is_trainable(w, layer.in_head());
            store.insert(w.name.clone(), tensor, trainable);
        }
    }
    store
}

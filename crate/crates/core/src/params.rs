//! Named parameter storage. Every learnable tensor in a model lives here
//! under a dotted name ("text.block0.attn.wq"); layers hold names, not
//! tensors, so the optimizer, checkpointing and the gradient checker all see
//! one flat, insertion-ordered map.

use indexmap::IndexMap;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Debug, Clone)]
pub struct Param {
    pub value: Tensor,
    pub grad: Tensor,
    pub trainable: bool,
}

#[derive(Debug, Clone, Default)]
pub struct ParamStore {
    entries: IndexMap<String, Param>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    /// Register a tensor. Names must be unique.
    pub fn insert(&mut self, name: impl Into<String>, value: Tensor) {
        let name = name.into();
        let grad = Tensor::zeros(value.shape());
        let prev = self.entries.insert(
            name.clone(),
            Param {
                value,
                grad,
                trainable: true,
            },
        );
        assert!(prev.is_none(), "duplicate parameter name {name:?}");
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn contains(&self, name: &str) -> bool {
        self.entries.contains_key(name)
    }

    pub fn get(&self, name: &str) -> Result<&Param> {
        self.entries
            .get(name)
            .ok_or_else(|| Error::UnknownParam(name.to_string()))
    }

    pub fn get_mut(&mut self, name: &str) -> Result<&mut Param> {
        self.entries
            .get_mut(name)
            .ok_or_else(|| Error::UnknownParam(name.to_string()))
    }

    /// Value lookup; panics on a missing name. Layer code builds its names
    /// from the same scope it registered them under, so a miss is a bug.
    pub fn value(&self, name: &str) -> &Tensor {
        &self
            .entries
            .get(name)
            .unwrap_or_else(|| panic!("unknown parameter {name:?}"))
            .value
    }

    pub fn value_mut(&mut self, name: &str) -> &mut Tensor {
        &mut self
            .entries
            .get_mut(name)
            .unwrap_or_else(|| panic!("unknown parameter {name:?}"))
            .value
    }

    /// Accumulate into a parameter's gradient slot.
    pub fn acc_grad(&mut self, name: &str, delta: &Tensor) {
        let p = self
            .entries
            .get_mut(name)
            .unwrap_or_else(|| panic!("unknown parameter {name:?}"));
        p.grad.add_assign(delta);
    }

    pub fn acc_grad_scaled(&mut self, name: &str, delta: &Tensor, scale: f64) {
        let p = self
            .entries
            .get_mut(name)
            .unwrap_or_else(|| panic!("unknown parameter {name:?}"));
        p.grad.add_scaled(delta, scale);
    }

    pub fn zero_grads(&mut self) {
        for p in self.entries.values_mut() {
            p.grad.fill(0.0);
        }
    }

    /// Mark every entry under `prefix` (dotted) trainable or frozen.
    pub fn set_trainable_prefix(&mut self, prefix: &str, trainable: bool) {
        for (name, p) in self.entries.iter_mut() {
            if name.starts_with(prefix) {
                p.trainable = trainable;
            }
        }
    }

    /// Insertion-ordered iteration; this order is the checkpoint manifest
    /// order and the optimizer traversal order.
    pub fn iter(&self) -> impl Iterator<Item = (&str, &Param)> {
        self.entries.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&str, &mut Param)> {
        self.entries.iter_mut().map(|(k, v)| (k.as_str(), v))
    }

    pub fn names(&self) -> Vec<String> {
        self.entries.keys().cloned().collect()
    }

    pub fn remove_prefix(&mut self, prefix: &str) {
        self.entries.retain(|name, _| !name.starts_with(prefix));
    }

    /// Overwrite every value with N(0, std^2) noise, keeping shapes. Gradient
    /// verification wants parameters well away from the degenerate
    /// near-uniform attention regime of the small training init.
    pub fn randomize(&mut self, std: f64, rng: &mut crate::rng::Rng) {
        for (_, p) in self.entries.iter_mut() {
            p.value = Tensor::randn(p.value.shape(), std, rng);
        }
    }
}

/// Dotted name builder for parameter namespaces.
#[derive(Debug, Clone)]
pub struct Scope {
    path: String,
}

impl Scope {
    pub fn root(name: &str) -> Self {
        Scope {
            path: name.to_string(),
        }
    }

    pub fn sub(&self, name: &str) -> Scope {
        Scope {
            path: format!("{}.{}", self.path, name),
        }
    }

    pub fn name(&self, leaf: &str) -> String {
        format!("{}.{}", self.path, leaf)
    }

    pub fn path(&self) -> &str {
        &self.path
    }
}

//! Named learnable state and its binding onto a tape.

use std::collections::HashSet;
use std::ops::Index;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Result, TensorError};
use crate::scalar::Real;
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Ordered, uniquely named parameters. Layers hold [`ParamId`]s, so one
/// model description drives stores of any precision.
#[derive(Debug, Clone, PartialEq)]
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
        Self {
            names: Vec::new(),
            tensors: Vec::new(),
        }
    }

    pub fn insert(&mut self, name: impl Into<String>, tensor: Tensor<T>) -> ParamId {
        let name = name.into();
        assert!(
            !self.names.contains(&name),
            "duplicate parameter name {name}"
        );
        self.names.push(name);
        self.tensors.push(tensor.with_grad());
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

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.tensors.len()).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor<T>)> {
        self.names.iter().map(String::as_str).zip(&self.tensors)
    }

    pub fn tensors_mut(&mut self) -> impl Iterator<Item = &mut Tensor<T>> {
        self.tensors.iter_mut()
    }

    /// Total learnable scalars.
    pub fn scalar_count(&self) -> usize {
        self.tensors.iter().map(Tensor::numel).sum()
    }

    pub fn cast<U: Real>(&self) -> ParamStore<U> {
        ParamStore {
            names: self.names.clone(),
            tensors: self.tensors.iter().map(Tensor::cast).collect(),
        }
    }

    /// Records every parameter as a gradient-receiving leaf.
    pub fn bind(&self, tape: &mut Tape<T>) -> Bindings {
        Bindings(
            self.tensors
                .iter()
                .map(|t| tape.param(Tensor::new(t.shape(), t.data().to_vec()).unwrap()))
                .collect(),
        )
    }

    /// Adds the tape's leaf gradients into the parameter grad buffers.
    pub fn absorb_grads(&mut self, tape: &Tape<T>, bindings: &Bindings) -> Result<()> {
        for (t, &v) in self.tensors.iter_mut().zip(&bindings.0) {
            match tape.grad(v) {
                Some(g) => t.accumulate_grad(g)?,
                None => t.accumulate_grad(&vec![T::zero(); t.numel()])?,
            }
        }
        Ok(())
    }

    pub fn zero_grads(&mut self) {
        self.tensors.iter_mut().for_each(Tensor::zero_grad);
    }

    /// Replaces values from `(name, shape, data)` records, requiring an exact
    /// name and shape match with the current layout.
    pub fn load_values<'a>(
        &mut self,
        records: impl IntoIterator<Item = (&'a str, &'a [usize], &'a [T])>,
    ) -> Result<()> {
        let mut seen = HashSet::new();
        for (name, shape, data) in records {
            let id = self
                .find(name)
                .ok_or_else(|| TensorError::Config(format!("unknown parameter {name}")))?;
            let t = &mut self.tensors[id.0];
            if t.shape() != shape {
                return Err(TensorError::ShapeMismatch {
                    op: "load_values",
                    lhs: t.shape().to_vec(),
                    rhs: shape.to_vec(),
                });
            }
            t.data_mut().copy_from_slice(data);
            seen.insert(id);
        }
        if seen.len() != self.len() {
            let missing: Vec<&str> = self
                .ids()
                .filter(|id| !seen.contains(id))
                .map(|id| self.name(id))
                .collect();
            return Err(TensorError::Config(format!(
                "missing parameters: {}",
                missing.join(", ")
            )));
        }
        Ok(())
    }
}

/// Tape variables for every parameter of one forward pass.
#[derive(Debug, Clone)]
pub struct Bindings(Vec<Var>);

impl Bindings {
    /// Bindings from explicit variables, in parameter-store order.
    pub fn new(vars: Vec<Var>) -> Self {
        Self(vars)
    }

    pub fn vars(&self) -> &[Var] {
        &self.0
    }
}

impl Index<ParamId> for Bindings {
    type Output = Var;

    fn index(&self, id: ParamId) -> &Var {
        &self.0[id.0]
    }
}

/// Creates scoped, deterministically initialized parameters.
pub struct ParamBuilder<'a, T> {
    store: &'a mut ParamStore<T>,
    rng: &'a mut ChaCha8Rng,
    prefix: String,
}

impl<'a, T: Real> ParamBuilder<'a, T> {
    pub fn new(store: &'a mut ParamStore<T>, rng: &'a mut ChaCha8Rng) -> Self {
        Self {
            store,
            rng,
            prefix: String::new(),
        }
    }

    /// Child builder whose names are prefixed with `name.`.
    pub fn scope(&mut self, name: &str) -> ParamBuilder<'_, T> {
        let prefix = if self.prefix.is_empty() {
            name.to_string()
        } else {
            format!("{}.{name}", self.prefix)
        };
        ParamBuilder {
            store: self.store,
            rng: self.rng,
            prefix,
        }
    }

    fn full_name(&self, name: &str) -> String {
        if self.prefix.is_empty() {
            name.to_string()
        } else {
            format!("{}.{name}", self.prefix)
        }
    }

    pub fn tensor(&mut self, name: &str, t: Tensor<T>) -> ParamId {
        let full = self.full_name(name);
        self.store.insert(full, t)
    }

    /// Normal(0, 1/fan_in) weights.
    pub fn fan_in(&mut self, name: &str, shape: &[usize], fan_in: usize) -> ParamId {
        let std = 1.0 / (fan_in as f64).sqrt();
        let t = Tensor::randn(shape, std, self.rng);
        self.tensor(name, t)
    }

    pub fn zeros(&mut self, name: &str, shape: &[usize]) -> ParamId {
        self.tensor(name, Tensor::zeros(shape))
    }

    pub fn ones(&mut self, name: &str, shape: &[usize]) -> ParamId {
        self.tensor(name, Tensor::ones(shape))
    }
}

/// Fresh deterministic generator for parameter initialization.
pub fn init_rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

//! Named parameters with gradient buffers and optimizer state, and the
//! binding of parameters into a [`Graph`].

use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::graph::{Grads, Graph, Var};
use crate::random::{uniform_tensor, SeededRng};
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq)]
pub struct Param {
    pub value: Tensor,
    pub grad: Tensor,
    pub m: Tensor,
    pub v: Tensor,
}

impl Param {
    pub fn new(value: Tensor) -> Param {
        let z = Tensor::zeros(value.shape().to_vec());
        Param {
            grad: z.clone(),
            m: z.clone(),
            v: z,
            value,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    params: BTreeMap<String, Param>,
    /// Number of optimizer steps taken.
    pub step: u64,
}

impl ParamStore {
    pub fn new() -> ParamStore {
        ParamStore::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, value: Tensor) {
        self.params.insert(name.into(), Param::new(value));
    }

    pub fn contains(&self, name: &str) -> bool {
        self.params.contains_key(name)
    }

    pub fn value(&self, name: &str) -> Option<&Tensor> {
        self.params.get(name).map(|p| &p.value)
    }

    pub fn param(&self, name: &str) -> Option<&Param> {
        self.params.get(name)
    }

    pub fn param_mut(&mut self, name: &str) -> Option<&mut Param> {
        self.params.get_mut(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Param)> {
        self.params.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&String, &mut Param)> {
        self.params.iter_mut()
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    /// Total number of scalar parameters.
    pub fn num_scalars(&self) -> usize {
        self.params.values().map(|p| p.value.len()).sum()
    }

    pub fn zero_grad(&mut self) {
        for p in self.params.values_mut() {
            p.grad = Tensor::zeros(p.value.shape().to_vec());
        }
    }

    /// Replaces a parameter value, keeping its optimizer state.
    pub fn set_value(&mut self, name: &str, value: Tensor) -> Result<()> {
        let p = self
            .params
            .get_mut(name)
            .ok_or_else(|| Error::invalid("set_value", format!("unknown parameter {name}")))?;
        if p.value.shape() != value.shape() {
            return Err(Error::shape("set_value", format!("{name}: {:?} vs {:?}", p.value.shape(), value.shape())));
        }
        p.value = value;
        Ok(())
    }
}

/// Fan-in scaled initializer: weights uniform in `±1/sqrt(fan_in)`.
pub struct Init<'a> {
    pub store: &'a mut ParamStore,
    pub rng: SeededRng,
}

impl Init<'_> {
    pub fn linear(&mut self, name: &str, cin: usize, cout: usize) {
        let a = 1.0 / (cin as f64).sqrt();
        let t = uniform_tensor(&[cin, cout], -a, a, &mut self.rng);
        self.store.insert(name, t);
    }

    pub fn conv(&mut self, name: &str, cout: usize, cin_per_group: usize, k: usize) {
        let a = 1.0 / ((cin_per_group * k * k) as f64).sqrt();
        let t = uniform_tensor(&[cout, cin_per_group, k, k], -a, a, &mut self.rng);
        self.store.insert(name, t);
    }

    pub fn zeros(&mut self, name: &str, shape: &[usize]) {
        self.store.insert(name, Tensor::zeros(shape.to_vec()));
    }

    pub fn full(&mut self, name: &str, shape: &[usize], value: f64) {
        self.store.insert(name, Tensor::full(shape.to_vec(), value));
    }

    /// LayerNorm gain (ones) and bias (zeros) under `name.g` / `name.b`.
    pub fn layer_norm(&mut self, name: &str, c: usize) {
        self.full(&format!("{name}.g"), &[c], 1.0);
        self.zeros(&format!("{name}.b"), &[c]);
    }
}

/// A graph under construction together with the parameters it reads.
pub struct Ctx<'a> {
    pub g: Graph,
    store: &'a ParamStore,
    bound: BTreeMap<String, Var>,
}

impl<'a> Ctx<'a> {
    pub fn new(store: &'a ParamStore, record: bool) -> Ctx<'a> {
        Ctx {
            g: if record { Graph::new() } else { Graph::inference() },
            store,
            bound: BTreeMap::new(),
        }
    }

    /// The graph leaf for parameter `name`, created on first use.
    pub fn p(&mut self, name: &str) -> Result<Var> {
        if let Some(&v) = self.bound.get(name) {
            return Ok(v);
        }
        let value = self
            .store
            .value(name)
            .ok_or_else(|| Error::invalid("param", format!("unknown parameter {name}")))?;
        let v = self.g.param(value.clone());
        self.bound.insert(name.to_string(), v);
        Ok(v)
    }

    pub fn store(&self) -> &ParamStore {
        self.store
    }

    pub fn bound(&self) -> impl Iterator<Item = (&String, &Var)> {
        self.bound.iter()
    }

    /// Adds the gradients of every bound parameter into `store`.
    pub fn accumulate(&self, grads: &Grads, store: &mut ParamStore) {
        for (name, &v) in &self.bound {
            if let (Some(g), Some(p)) = (grads.get(v), store.param_mut(name)) {
                p.grad.add_assign(g);
            }
        }
    }
}

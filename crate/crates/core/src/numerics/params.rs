use std::collections::HashMap;

use super::graph::Gradients;
use super::rng::RngStream;
use super::tensor::Tensor;
use crate::error::{Error, Result};

/// Handle to a parameter inside the [`ParamStore`] that registered it.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub(crate) usize);

/// Adaptive-moment state for one parameter.
#[derive(Clone, Debug, PartialEq)]
pub struct Moments {
    pub m: Vec<f64>,
    pub v: Vec<f64>,
    pub step: u64,
}

/// Named parameters owned by one component (world model, a value head, a policy).
///
/// Every name carries the store's namespace as a prefix, so names stay unique
/// when several stores are written into one checkpoint.
#[derive(Clone, Debug)]
pub struct ParamStore {
    namespace: String,
    names: Vec<String>,
    values: Vec<Tensor>,
    grads: Vec<Tensor>,
    moments: Vec<Moments>,
    index: HashMap<String, usize>,
}

impl ParamStore {
    pub fn new(namespace: impl Into<String>) -> Self {
        Self {
            namespace: namespace.into(),
            names: Vec::new(),
            values: Vec::new(),
            grads: Vec::new(),
            moments: Vec::new(),
            index: HashMap::new(),
        }
    }

    pub fn namespace(&self) -> &str {
        &self.namespace
    }

    /// Registers `value` under `namespace/name`.
    pub fn register(&mut self, name: &str, value: Tensor) -> Result<ParamId> {
        let full = format!("{}/{}", self.namespace, name);
        if self.index.contains_key(&full) {
            return Err(Error::DuplicateParameter(full));
        }
        let id = self.values.len();
        let n = value.len();
        self.grads.push(Tensor::zeros(value.shape()));
        self.moments.push(Moments {
            m: vec![0.0; n],
            v: vec![0.0; n],
            step: 0,
        });
        self.values.push(value);
        self.index.insert(full.clone(), id);
        self.names.push(full);
        Ok(ParamId(id))
    }

    /// Registers a weight drawn uniformly from `±1/sqrt(fan_in)`.
    pub fn register_uniform(
        &mut self,
        name: &str,
        shape: &[usize],
        fan_in: usize,
        rng: &mut RngStream,
    ) -> Result<ParamId> {
        let bound = 1.0 / (fan_in.max(1) as f64).sqrt();
        let n: usize = shape.iter().product();
        let data = (0..n).map(|_| rng.uniform_in(-bound, bound)).collect();
        self.register(name, Tensor::new(shape.to_vec(), data)?)
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn num_scalars(&self) -> usize {
        self.values.iter().map(Tensor::len).sum()
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.values.len()).map(ParamId)
    }

    pub fn id(&self, full_name: &str) -> Option<ParamId> {
        self.index.get(full_name).copied().map(ParamId)
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn value(&self, id: ParamId) -> &Tensor {
        &self.values[id.0]
    }

    pub fn value_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.values[id.0]
    }

    pub fn grad(&self, id: ParamId) -> &Tensor {
        &self.grads[id.0]
    }

    pub fn moments(&self, id: ParamId) -> &Moments {
        &self.moments[id.0]
    }

    pub(crate) fn parts_mut(&mut self, id: ParamId) -> (&str, &mut Tensor, &Tensor, &mut Moments) {
        let i = id.0;
        (
            &self.names[i],
            &mut self.values[i],
            &self.grads[i],
            &mut self.moments[i],
        )
    }

    pub(crate) fn set_moments(&mut self, id: ParamId, m: Moments) {
        self.moments[id.0] = m;
    }

    pub fn zero_grad(&mut self) {
        for g in &mut self.grads {
            g.data_mut().fill(0.0);
        }
    }

    /// Adds the entries of `grads` that belong to this store.
    pub fn accumulate(&mut self, grads: &Gradients) {
        for (ns, id, g) in grads.entries() {
            if ns == self.namespace {
                for (a, b) in self.grads[id.0].data_mut().iter_mut().zip(g.data()) {
                    *a += b;
                }
            }
        }
    }

    /// Copies values (not optimizer state) from a store with the same layout.
    pub fn copy_values_from(&mut self, other: &ParamStore) -> Result<()> {
        if other.values.len() != self.values.len() {
            return Err(Error::Shape("parameter stores differ in layout".into()));
        }
        for (a, b) in self.values.iter_mut().zip(&other.values) {
            if a.shape() != b.shape() {
                return Err(Error::Shape("parameter stores differ in layout".into()));
            }
            a.data_mut().copy_from_slice(b.data());
        }
        Ok(())
    }

    /// Bitwise comparison of parameter values.
    pub fn values_bitwise_eq(&self, other: &ParamStore) -> bool {
        self.values.len() == other.values.len()
            && self.values.iter().zip(&other.values).all(|(a, b)| {
                a.shape() == b.shape()
                    && a.data().iter().zip(b.data()).all(|(x, y)| x.to_bits() == y.to_bits())
            })
    }

    pub fn all_finite(&self) -> bool {
        self.values.iter().all(Tensor::is_finite)
    }
}

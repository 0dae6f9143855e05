//! Named parameter sets and their binding into a [`Graph`].

use alloc::collections::BTreeMap;
use alloc::string::{String, ToString};
use alloc::vec::Vec;

use rand::Rng;
use rand_distr::{Distribution, Uniform};

use crate::error::{Error, Result};
use crate::graph::{Gradients, Graph, Var};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Ordered map from parameter name to value. Iteration order is the
/// lexicographic name order, which fixes every reduction over parameters.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct ParamStore<T> {
    params: BTreeMap<String, Tensor<T>>,
}

impl<T: Scalar> ParamStore<T> {
    pub fn new() -> Self {
        Self {
            params: BTreeMap::new(),
        }
    }

    pub fn insert(&mut self, name: impl Into<String>, value: Tensor<T>) {
        self.params.insert(name.into(), value);
    }

    pub fn get(&self, name: &str) -> Result<&Tensor<T>> {
        self.params
            .get(name)
            .ok_or_else(|| Error::UnknownParam(name.to_string()))
    }

    pub fn get_mut(&mut self, name: &str) -> Result<&mut Tensor<T>> {
        self.params
            .get_mut(name)
            .ok_or_else(|| Error::UnknownParam(name.to_string()))
    }

    pub fn contains(&self, name: &str) -> bool {
        self.params.contains_key(name)
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor<T>)> {
        self.params.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.params.keys().map(String::as_str)
    }

    /// Total number of scalars.
    pub fn scalar_count(&self) -> usize {
        self.params.values().map(Tensor::len).sum()
    }

    /// Moves every entry of `other` into `self`.
    pub fn extend(&mut self, other: ParamStore<T>) {
        self.params.extend(other.params);
    }

    pub fn cast<U: Scalar>(&self) -> ParamStore<U> {
        ParamStore {
            params: self.params.iter().map(|(k, v)| (k.clone(), v.cast())).collect(),
        }
    }

    /// Inserts every parameter as a leaf. Leaves whose name satisfies
    /// `trainable` record gradients.
    pub fn bind(&self, g: &mut Graph<T>, trainable: impl Fn(&str) -> bool) -> Binding {
        let vars = self
            .params
            .iter()
            .map(|(k, v)| {
                let train = trainable(k);
                (k.clone(), (g.leaf(v.clone(), train), train))
            })
            .collect();
        Binding { vars }
    }
}

/// Parameter name to graph leaf mapping produced by [`ParamStore::bind`].
#[derive(Debug, Clone)]
pub struct Binding {
    vars: BTreeMap<String, (Var, bool)>,
}

impl Binding {
    /// Binding over existing leaves, all treated as trainable.
    pub fn from_leaves<'a>(leaves: impl IntoIterator<Item = (&'a str, Var)>) -> Self {
        Self {
            vars: leaves.into_iter().map(|(k, v)| (k.to_string(), (v, true))).collect(),
        }
    }

    pub fn get(&self, name: &str) -> Result<Var> {
        self.vars
            .get(name)
            .map(|&(v, _)| v)
            .ok_or_else(|| Error::UnknownParam(name.to_string()))
    }

    pub fn trainable_names(&self) -> Vec<String> {
        self.vars
            .iter()
            .filter(|(_, (_, t))| *t)
            .map(|(k, _)| k.clone())
            .collect()
    }

    /// Gradients of the trainable parameters, keyed by name.
    pub fn collect<T: Scalar>(&self, grads: &Gradients<T>) -> BTreeMap<String, Tensor<T>> {
        self.vars
            .iter()
            .filter(|(_, (_, t))| *t)
            .filter_map(|(k, (v, _))| grads.get(*v).map(|g| (k.clone(), g.clone())))
            .collect()
    }
}

/// Uniform(-limit, limit) initialization with `limit = sqrt(6 / (fan_in + fan_out))`.
pub fn glorot<T: Scalar, R: Rng + ?Sized>(rng: &mut R, shape: &[usize], fan_in: usize, fan_out: usize) -> Tensor<T> {
    let limit = libm::sqrt(6.0 / (fan_in + fan_out) as f64);
    let dist = Uniform::new_inclusive(-limit, limit).expect("finite bounds");
    Tensor::from_fn(shape, |_| T::of(dist.sample(rng)))
}

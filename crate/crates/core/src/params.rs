//! Named parameter collections and their binding to a tape.

use std::collections::BTreeMap;

use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::tensor::{Float, Gradients, Tape, Tensor, Var};

/// Parameters keyed by dotted name. Iteration order is the name order, which
/// keeps initialization, checkpoints and updates deterministic.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct ParamSet<T> {
    tensors: BTreeMap<String, Tensor<T>>,
}

/// Tape handles of a bound [`ParamSet`].
#[derive(Debug, Clone, Default)]
pub struct Bound {
    vars: BTreeMap<String, Var>,
}

impl Bound {
    pub fn var(&self, name: &str) -> Var {
        match self.vars.get(name) {
            Some(&v) => v,
            None => panic!("parameter {name} was not bound"),
        }
    }

    pub fn get(&self, name: &str) -> Option<Var> {
        self.vars.get(name).copied()
    }

    pub fn extend(&mut self, other: Bound) {
        self.vars.extend(other.vars);
    }
}

impl FromIterator<(String, Var)> for Bound {
    fn from_iter<I: IntoIterator<Item = (String, Var)>>(iter: I) -> Self {
        Self { vars: iter.into_iter().collect() }
    }
}

impl<T: Float> ParamSet<T> {
    pub fn new() -> Self {
        Self { tensors: BTreeMap::new() }
    }

    pub fn insert(&mut self, name: impl Into<String>, t: Tensor<T>) {
        self.tensors.insert(name.into(), t);
    }

    pub fn get(&self, name: &str) -> Option<&Tensor<T>> {
        self.tensors.get(name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor<T>> {
        self.tensors.get_mut(name)
    }

    pub fn remove(&mut self, name: &str) -> Option<Tensor<T>> {
        self.tensors.remove(name)
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Tensor<T>)> {
        self.tensors.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&String, &mut Tensor<T>)> {
        self.tensors.iter_mut()
    }

    pub fn names(&self) -> impl Iterator<Item = &String> {
        self.tensors.keys()
    }

    pub fn extend(&mut self, other: ParamSet<T>) {
        self.tensors.extend(other.tensors);
    }

    pub fn numel(&self) -> usize {
        self.tensors.values().map(Tensor::len).sum()
    }

    /// Same names with the same shapes.
    pub fn same_structure(&self, other: &Self) -> bool {
        self.tensors.len() == other.tensors.len()
            && self
                .tensors
                .iter()
                .zip(&other.tensors)
                .all(|((na, a), (nb, b))| na == nb && a.shape() == b.shape())
    }

    /// Marks every tensor as trainable (or not).
    pub fn set_trainable(&mut self, on: bool) {
        for t in self.tensors.values_mut() {
            t.requires_grad = on;
        }
    }

    pub fn bind(&self, tape: &mut Tape<T>) -> Bound {
        Bound {
            vars: self.tensors.iter().map(|(n, t)| (n.clone(), tape.leaf(t))).collect(),
        }
    }

    /// Gradients for every bound parameter that tracks one.
    pub fn collect_grads(&self, bound: &Bound, grads: &Gradients<T>) -> BTreeMap<String, Vec<T>> {
        self.tensors
            .keys()
            .filter_map(|n| {
                let v = bound.get(n)?;
                grads.get(v).map(|g| (n.clone(), g))
            })
            .collect()
    }

    pub fn all_finite(&self) -> bool {
        self.tensors.values().all(Tensor::all_finite)
    }

    pub fn cast<U: Float>(&self) -> ParamSet<U> {
        ParamSet {
            tensors: self.tensors.iter().map(|(n, t)| (n.clone(), t.cast())).collect(),
        }
    }

    pub fn into_inner(self) -> BTreeMap<String, Tensor<T>> {
        self.tensors
    }
}

impl<T: Float> FromIterator<(String, Tensor<T>)> for ParamSet<T> {
    fn from_iter<I: IntoIterator<Item = (String, Tensor<T>)>>(iter: I) -> Self {
        Self { tensors: iter.into_iter().collect() }
    }
}

/// Weight initializers drawing from a caller-supplied stream.
pub struct Init<'a, R: Rng> {
    pub rng: &'a mut R,
}

impl<R: Rng> Init<'_, R> {
    pub fn normal<T: Float>(&mut self, shape: Vec<usize>, std: f64) -> Tensor<T> {
        let n: usize = shape.iter().product();
        let dist = Normal::new(0.0, std).expect("init std");
        let data = (0..n).map(|_| T::lit(dist.sample(self.rng))).collect();
        Tensor::new(shape, data).expect("init shape").with_grad()
    }

    /// `N(0, 1/fan_in)` for a `[fan_in × fan_out]` matrix.
    pub fn linear<T: Float>(&mut self, fan_in: usize, fan_out: usize) -> Tensor<T> {
        self.normal(vec![fan_in, fan_out], 1.0 / (fan_in as f64).sqrt())
    }

    pub fn zeros<T: Float>(&mut self, shape: Vec<usize>) -> Tensor<T> {
        Tensor::zeros(shape).with_grad()
    }

    pub fn ones<T: Float>(&mut self, shape: Vec<usize>) -> Tensor<T> {
        Tensor::full(shape, T::one()).with_grad()
    }
}

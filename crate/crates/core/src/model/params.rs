use std::collections::HashMap;

use rand::Rng as _;

use crate::rng::SeedPath;
use crate::tensor::Tensor;
use crate::{Error, Result};

/// Named parameter tensors in a fixed order.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct ParamStore {
    names: Vec<String>,
    tensors: Vec<Tensor>,
    index: HashMap<String, usize>,
}

impl ParamStore {
    pub fn new() -> ParamStore {
        ParamStore::default()
    }

    pub fn push(&mut self, name: impl Into<String>, t: Tensor) -> Result<usize> {
        let name = name.into();
        if self.index.contains_key(&name) {
            return Err(Error::DuplicateId(name));
        }
        self.index.insert(name.clone(), self.names.len());
        self.names.push(name);
        self.tensors.push(t);
        Ok(self.names.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.names.len()
    }

    pub fn is_empty(&self) -> bool {
        self.names.is_empty()
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn tensors(&self) -> &[Tensor] {
        &self.tensors
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.index.get(name).map(|&i| &self.tensors[i])
    }

    pub fn position(&self, name: &str) -> Option<usize> {
        self.index.get(name).copied()
    }

    pub fn set(&mut self, i: usize, t: Tensor) -> Result<()> {
        if t.shape() != self.tensors[i].shape() {
            return Err(Error::shape(
                "param_set",
                format!("{}: {:?} vs {:?}", self.names[i], self.tensors[i].shape(), t.shape()),
            ));
        }
        self.tensors[i] = t;
        Ok(())
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.names.iter().map(String::as_str).zip(&self.tensors)
    }

    pub fn parameter_count(&self) -> usize {
        self.tensors.iter().map(Tensor::numel).sum()
    }

    /// Same names, same shapes, in the same order.
    pub fn same_layout(&self, other: &ParamStore) -> bool {
        self.names == other.names
            && self
                .tensors
                .iter()
                .zip(&other.tensors)
                .all(|(a, b)| a.shape() == b.shape())
    }
}

/// Initializers. Each draws from an rng derived from `(seed, name)`, so
/// adding a parameter never perturbs the others.
pub(crate) fn uniform(seed: u64, name: &str, shape: &[usize], bound: f64) -> Tensor {
    let mut rng = SeedPath::new(seed).label("init").label(name).rng();
    let n = shape.iter().product();
    let data = (0..n).map(|_| rng.random_range(-bound..=bound)).collect();
    Tensor::new(shape.to_vec(), data).expect("shape matches")
}

pub(crate) fn constant(shape: &[usize], v: f64) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), vec![v; n]).expect("shape matches")
}

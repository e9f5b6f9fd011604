use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::numeric::{Element, Tensor};

/// Named model parameters, iterated in name order.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct ParamSet<T> {
    tensors: BTreeMap<String, Tensor<T>>,
}

impl<T: Element> ParamSet<T> {
    pub fn new() -> Self {
        ParamSet {
            tensors: BTreeMap::new(),
        }
    }

    pub fn insert(&mut self, name: impl Into<String>, t: Tensor<T>) {
        self.tensors.insert(name.into(), t);
    }

    pub fn get(&self, name: &str) -> Result<&Tensor<T>> {
        self.tensors
            .get(name)
            .ok_or_else(|| Error::Contract(format!("missing parameter `{name}`")))
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor<T>> {
        self.tensors.get_mut(name)
    }

    pub fn contains(&self, name: &str) -> bool {
        self.tensors.contains_key(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor<T>)> {
        self.tensors.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.tensors.keys().map(String::as_str)
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn cast<U: Element>(&self) -> ParamSet<U> {
        ParamSet {
            tensors: self.tensors.iter().map(|(k, v)| (k.clone(), v.cast())).collect(),
        }
    }

    pub fn shapes(&self) -> BTreeMap<String, Vec<usize>> {
        self.tensors
            .iter()
            .map(|(k, v)| (k.clone(), v.shape().to_vec()))
            .collect()
    }
}

/// Gradients keyed by parameter name. A missing entry means a zero gradient.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct GradientStore<T> {
    grads: BTreeMap<String, Tensor<T>>,
}

impl<T: Element> GradientStore<T> {
    pub fn new() -> Self {
        GradientStore {
            grads: BTreeMap::new(),
        }
    }

    pub fn get(&self, name: &str) -> Option<&Tensor<T>> {
        self.grads.get(name)
    }

    pub fn insert(&mut self, name: impl Into<String>, g: Tensor<T>) {
        self.grads.insert(name.into(), g);
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor<T>)> {
        self.grads.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn len(&self) -> usize {
        self.grads.len()
    }

    pub fn is_empty(&self) -> bool {
        self.grads.is_empty()
    }

    /// `self += other`, entry by entry.
    pub fn accumulate(&mut self, other: &GradientStore<T>) -> Result<()> {
        for (name, g) in &other.grads {
            match self.grads.get_mut(name) {
                Some(acc) => *acc = acc.add(g)?,
                None => {
                    self.grads.insert(name.clone(), g.clone());
                }
            }
        }
        Ok(())
    }

    pub fn scale(&mut self, k: T) -> Result<()> {
        for g in self.grads.values_mut() {
            *g = g.scale(k)?;
        }
        Ok(())
    }
}

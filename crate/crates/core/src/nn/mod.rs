//! Hand-rolled neural-network building blocks: layers with explicit forward
//! caches and manual backward passes, the conditional denoiser assembled from
//! them, and the optimizer.
//!
//! Parameters are addressed by dotted path names (for example
//! `ctrl.enc1.conv1.weight`) through the [`Visit`] trait; gradients accumulate
//! into a [`GradStore`] keyed by the same names.

pub mod layers;
pub mod optim;
pub mod unet;

use std::collections::BTreeMap;

use ndarray::{ArrayD, ArrayViewD, ArrayViewMutD};

use crate::tensor::Real;

/// Named read/write access to every parameter tensor, in a fixed traversal
/// order. The traversal order defines the serialization order.
pub trait Visit<F: Real> {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, ArrayViewD<'_, F>));
    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, ArrayViewMutD<'_, F>));
}

/// Accumulated gradients keyed by parameter name.
#[derive(Debug, Default)]
pub struct GradStore<F: Real> {
    grads: BTreeMap<String, ArrayD<F>>,
}

impl<F: Real> GradStore<F> {
    pub fn new() -> Self {
        Self {
            grads: BTreeMap::new(),
        }
    }

    /// Adds a contribution, summing with anything already recorded.
    pub fn add(&mut self, name: &str, g: ArrayD<F>) {
        match self.grads.get_mut(name) {
            Some(acc) => *acc += &g,
            None => {
                self.grads.insert(name.to_owned(), g);
            }
        }
    }

    pub fn get(&self, name: &str) -> Option<&ArrayD<F>> {
        self.grads.get(name)
    }

    pub fn scale(&mut self, s: F) {
        for g in self.grads.values_mut() {
            g.mapv_inplace(|v| v * s);
        }
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.grads.keys().map(String::as_str)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &ArrayD<F>)> {
        self.grads.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn len(&self) -> usize {
        self.grads.len()
    }

    pub fn is_empty(&self) -> bool {
        self.grads.is_empty()
    }
}

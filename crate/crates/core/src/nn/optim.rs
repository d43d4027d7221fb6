//! Adam optimizer over named parameters.

use std::collections::BTreeMap;

use ndarray::ArrayD;

use super::{GradStore, Visit};
use crate::tensor::Real;

#[derive(Debug, Clone, Copy)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Adam with bias correction. Moment buffers are created lazily per parameter
/// name; only parameters that have a gradient entry are touched, so frozen
/// parts of a model never move.
#[derive(Debug)]
pub struct Adam<F: Real> {
    pub config: AdamConfig,
    step_count: u64,
    m: BTreeMap<String, ArrayD<F>>,
    v: BTreeMap<String, ArrayD<F>>,
}

impl<F: Real> Adam<F> {
    pub fn new(config: AdamConfig) -> Self {
        Self {
            config,
            step_count: 0,
            m: BTreeMap::new(),
            v: BTreeMap::new(),
        }
    }

    pub fn step_count(&self) -> u64 {
        self.step_count
    }

    /// Applies one update to every parameter of `model` that appears in
    /// `grads`.
    pub fn step<M: Visit<F> + ?Sized>(&mut self, model: &mut M, prefix: &str, grads: &GradStore<F>) {
        self.step_count += 1;
        let t = self.step_count as i32;
        let b1 = F::from_f64(self.config.beta1);
        let b2 = F::from_f64(self.config.beta2);
        let one = F::one();
        let lr_t = F::from_f64(
            self.config.lr * (1.0 - self.config.beta2.powi(t)).sqrt()
                / (1.0 - self.config.beta1.powi(t)),
        );
        let eps = F::from_f64(self.config.eps);
        let m_map = &mut self.m;
        let v_map = &mut self.v;
        model.visit_mut(prefix, &mut |name, mut p| {
            let Some(g) = grads.get(name) else {
                return;
            };
            let m = m_map
                .entry(name.to_owned())
                .or_insert_with(|| ArrayD::zeros(g.raw_dim()));
            let v = v_map
                .entry(name.to_owned())
                .or_insert_with(|| ArrayD::zeros(g.raw_dim()));
            ndarray::Zip::from(&mut p)
                .and(g)
                .and(&mut m.view_mut())
                .and(&mut v.view_mut())
                .for_each(|p, &g, m, v| {
                    *m = b1 * *m + (one - b1) * g;
                    *v = b2 * *v + (one - b2) * g * g;
                    *p = *p - lr_t * *m / (v.sqrt() + eps);
                });
        });
    }

    /// Moment buffers and step count, for checkpointing.
    pub fn export_state(&self) -> (u64, Vec<(String, ArrayD<F>)>) {
        let mut out = Vec::new();
        for (k, a) in &self.m {
            out.push((format!("m.{k}"), a.clone()));
        }
        for (k, a) in &self.v {
            out.push((format!("v.{k}"), a.clone()));
        }
        (self.step_count, out)
    }

    pub fn import_state(
        &mut self,
        step_count: u64,
        entries: impl IntoIterator<Item = (String, ArrayD<F>)>,
    ) {
        self.step_count = step_count;
        self.m.clear();
        self.v.clear();
        for (name, arr) in entries {
            if let Some(rest) = name.strip_prefix("m.") {
                self.m.insert(rest.to_owned(), arr);
            } else if let Some(rest) = name.strip_prefix("v.") {
                self.v.insert(rest.to_owned(), arr);
            }
        }
    }
}

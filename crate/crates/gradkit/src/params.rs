//! Named parameters, gradient accumulation and Adam.

use std::collections::BTreeMap;

use crate::error::GradError;
use crate::{Element, Graph, Result, Tensor, Var};

/// First/second moment buffers; allocated on the first optimizer step.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamState<T> {
    pub m: Tensor<T>,
    pub v: Tensor<T>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Param<T> {
    pub value: Tensor<T>,
    pub grad: Tensor<T>,
    pub state: Option<AdamState<T>>,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 1e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Parameters keyed by unique name, iterated in name order.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore<T> {
    params: BTreeMap<String, Param<T>>,
    step: u64,
}

/// Graph handles for every parameter of a store.
pub struct Bound<'g, T> {
    vars: BTreeMap<String, Var<'g, T>>,
}

impl<'g, T: Element> Bound<'g, T> {
    pub fn get(&self, name: &str) -> Result<Var<'g, T>> {
        self.vars
            .get(name)
            .copied()
            .ok_or_else(|| GradError::UnknownParam(name.to_string()))
    }
}

impl<T: Element> ParamStore<T> {
    pub fn new() -> Self {
        Self {
            params: BTreeMap::new(),
            step: 0,
        }
    }

    pub fn insert(&mut self, name: impl Into<String>, value: Tensor<T>) -> Result<()> {
        let name = name.into();
        if self.params.contains_key(&name) {
            return Err(GradError::DuplicateParam(name));
        }
        let grad = Tensor::zeros(value.shape());
        self.params.insert(name, Param { value, grad, state: None });
        Ok(())
    }

    pub fn get(&self, name: &str) -> Option<&Param<T>> {
        self.params.get(name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Param<T>> {
        self.params.get_mut(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Param<T>)> {
        self.params.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&String, &mut Param<T>)> {
        self.params.iter_mut()
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn numel(&self) -> usize {
        self.params.values().map(|p| p.value.numel()).sum()
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    pub fn set_step_count(&mut self, step: u64) {
        self.step = step;
    }

    pub fn has_optimizer_state(&self) -> bool {
        self.params.values().any(|p| p.state.is_some())
    }

    /// Drops all optimizer moments and resets the step counter.
    pub fn clear_optimizer_state(&mut self) {
        self.params.values_mut().for_each(|p| p.state = None);
        self.step = 0;
    }

    /// Registers every parameter as a differentiable leaf.
    pub fn bind<'g>(&self, g: &'g Graph<T>) -> Bound<'g, T> {
        Bound {
            vars: self
                .params
                .iter()
                .map(|(k, p)| (k.clone(), g.leaf(p.value.clone())))
                .collect(),
        }
    }

    /// Registers every parameter as a constant (no gradients flow back).
    pub fn bind_frozen<'g>(&self, g: &'g Graph<T>) -> Bound<'g, T> {
        Bound {
            vars: self
                .params
                .iter()
                .map(|(k, p)| (k.clone(), g.constant(p.value.clone())))
                .collect(),
        }
    }

    /// Adds the gradients a backward pass left on `bound`'s leaves.
    pub fn accumulate_grads(&mut self, g: &Graph<T>, bound: &Bound<'_, T>) {
        for (name, var) in &bound.vars {
            let (Some(p), Some(gr)) = (self.params.get_mut(name), g.grad(*var)) else {
                continue;
            };
            p.grad
                .data_mut()
                .iter_mut()
                .zip(gr.data())
                .for_each(|(a, &b)| *a = *a + b);
        }
    }

    pub fn zero_grads(&mut self) {
        for p in self.params.values_mut() {
            p.grad.data_mut().iter_mut().for_each(|g| *g = T::zero());
        }
    }

    /// One bias-corrected Adam update from the accumulated gradients. Gradients
    /// are left in place; the caller zeroes them.
    pub fn adam_step(&mut self, cfg: &AdamConfig) {
        self.step += 1;
        let t = self.step as i32;
        let b1 = T::from_f64_lossy(cfg.beta1);
        let b2 = T::from_f64_lossy(cfg.beta2);
        let c1 = T::from_f64_lossy(1.0 - cfg.beta1.powi(t));
        let c2 = T::from_f64_lossy(1.0 - cfg.beta2.powi(t));
        let lr = T::from_f64_lossy(cfg.lr);
        let eps = T::from_f64_lossy(cfg.eps);
        let one = T::one();
        for p in self.params.values_mut() {
            let state = p.state.get_or_insert_with(|| AdamState {
                m: Tensor::zeros(p.value.shape()),
                v: Tensor::zeros(p.value.shape()),
            });
            let (m, v) = (state.m.data_mut(), state.v.data_mut());
            for (i, (w, &g)) in p.value.data_mut().iter_mut().zip(p.grad.data()).enumerate() {
                m[i] = b1 * m[i] + (one - b1) * g;
                v[i] = b2 * v[i] + (one - b2) * g * g;
                let mh = m[i] / c1;
                let vh = v[i] / c2;
                *w = *w - lr * mh / (vh.sqrt() + eps);
            }
        }
    }

    /// Sum of squared gradient entries.
    pub fn grad_sq_norm(&self) -> f64 {
        self.params
            .values()
            .flat_map(|p| p.grad.data())
            .map(|g| g.to_f64().unwrap().powi(2))
            .sum()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn scalar_store(v: f64) -> ParamStore<f64> {
        let mut s = ParamStore::new();
        s.insert("w", Tensor::scalar(v)).unwrap();
        s
    }

    #[test]
    fn zero_gradient_leaves_parameters_unchanged() {
        let mut s = scalar_store(0.75);
        for _ in 0..10 {
            s.adam_step(&AdamConfig::default());
        }
        assert_eq!(s.get("w").unwrap().value.data(), &[0.75]);
        assert_eq!(s.step_count(), 10);
    }

    #[test]
    fn constant_gradient_step_tends_to_lr_times_sign() {
        let cfg = AdamConfig {
            lr: 1e-2,
            ..AdamConfig::default()
        };
        for g in [3.0, -0.02] {
            let mut s = scalar_store(0.0);
            let mut last = 0.0;
            let mut delta = 0.0;
            for _ in 0..1000 {
                s.get_mut("w").unwrap().grad.data_mut()[0] = g;
                s.adam_step(&cfg);
                let w = s.get("w").unwrap().value.data()[0];
                delta = w - last;
                last = w;
            }
            // With a constant gradient both moments are exact after bias correction.
            let expected = -cfg.lr * f64::signum(g);
            assert!((delta - expected).abs() < 1e-3 * cfg.lr, "{delta} vs {expected}");
        }
    }

    #[test]
    fn duplicate_names_are_rejected() {
        let mut s = scalar_store(1.0);
        assert_eq!(
            s.insert("w", Tensor::scalar(2.0)),
            Err(GradError::DuplicateParam("w".into()))
        );
    }

    #[test]
    fn identical_stores_stay_identical() {
        let mut a = ParamStore::<f32>::new();
        a.insert("k", Tensor::from_fn(&[3, 4], |i| i as f32 * 0.1)).unwrap();
        let mut b = a.clone();
        for step in 0..50 {
            for s in [&mut a, &mut b] {
                s.get_mut("k")
                    .unwrap()
                    .grad
                    .data_mut()
                    .iter_mut()
                    .enumerate()
                    .for_each(|(i, g)| *g = ((i + step) as f32).cos());
                s.adam_step(&AdamConfig::default());
                s.zero_grads();
            }
        }
        assert_eq!(a, b);
    }

    #[test]
    fn optimizer_state_is_lazy() {
        let mut s = scalar_store(1.0);
        assert!(!s.has_optimizer_state());
        s.adam_step(&AdamConfig::default());
        assert!(s.has_optimizer_state());
        s.clear_optimizer_state();
        assert!(!s.has_optimizer_state());
    }
}

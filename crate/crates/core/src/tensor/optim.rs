use std::collections::BTreeMap;

use super::Tensor;
use crate::error::{Error, Result};

/// Index of a parameter inside a [`ParamStore`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(usize);

/// A trainable tensor with its gradient buffer and Adam moments.
#[derive(Clone, Debug, PartialEq)]
pub struct Parameter {
    name: String,
    value: Tensor,
    grad: Option<Vec<f64>>,
    pub(crate) adam_m: Vec<f64>,
    pub(crate) adam_v: Vec<f64>,
    pub(crate) step_count: u64,
}

impl Parameter {
    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn value(&self) -> &Tensor {
        &self.value
    }

    pub fn value_mut(&mut self) -> &mut Tensor {
        &mut self.value
    }

    pub fn grad(&self) -> Option<&[f64]> {
        self.grad.as_deref()
    }

    pub fn adam_moments(&self) -> (&[f64], &[f64]) {
        (&self.adam_m, &self.adam_v)
    }

    pub fn step_count(&self) -> u64 {
        self.step_count
    }

    pub(crate) fn accumulate_grad(&mut self, g: &[f64]) {
        match &mut self.grad {
            Some(acc) => acc.iter_mut().zip(g).for_each(|(a, b)| *a += b),
            None => self.grad = Some(g.to_vec()),
        }
    }

    pub(crate) fn set_state(&mut self, m: Vec<f64>, v: Vec<f64>, steps: u64) {
        self.adam_m = m;
        self.adam_v = v;
        self.step_count = steps;
    }
}

/// Named parameters in registration order.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    params: Vec<Parameter>,
    by_name: BTreeMap<String, usize>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor) -> Result<ParamId> {
        let name = name.into();
        if self.by_name.contains_key(&name) {
            return Err(Error::DuplicateParam(name));
        }
        let n = value.len();
        self.by_name.insert(name.clone(), self.params.len());
        self.params.push(Parameter {
            name,
            value,
            grad: None,
            adam_m: vec![0.0; n],
            adam_v: vec![0.0; n],
            step_count: 0,
        });
        Ok(ParamId(self.params.len() - 1))
    }

    pub fn id(&self, name: &str) -> Result<ParamId> {
        self.by_name
            .get(name)
            .map(|&i| ParamId(i))
            .ok_or_else(|| Error::UnknownParam(name.to_string()))
    }

    pub fn get(&self, id: ParamId) -> &Parameter {
        &self.params[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Parameter {
        &mut self.params[id.0]
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Parameter)> {
        self.params.iter().enumerate().map(|(i, p)| (ParamId(i), p))
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.params.len()).map(ParamId)
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn num_scalars(&self) -> usize {
        self.params.iter().map(|p| p.value.len()).sum()
    }

    pub fn zero_grads(&mut self) {
        for p in &mut self.params {
            p.grad = None;
        }
    }

    /// Multiplies every accumulated gradient by `c`.
    pub fn scale_grads(&mut self, c: f64) {
        for p in &mut self.params {
            if let Some(g) = &mut p.grad {
                g.iter_mut().for_each(|v| *v *= c);
            }
        }
    }

    /// Euclidean norm over all accumulated gradients.
    pub fn grad_norm(&self) -> f64 {
        self.params
            .iter()
            .filter_map(|p| p.grad.as_ref())
            .flat_map(|g| g.iter())
            .map(|v| v * v)
            .sum::<f64>()
            .sqrt()
    }

    /// Rescales gradients so their global norm is at most `max_norm`.
    /// Returns the norm before clipping.
    pub fn clip_grad_norm(&mut self, max_norm: f64) -> f64 {
        let norm = self.grad_norm();
        if norm > max_norm {
            self.scale_grads(max_norm / norm);
        }
        norm
    }

    /// Gives every parameter without a gradient a zero gradient.
    pub fn fill_missing_grads(&mut self) {
        for p in &mut self.params {
            if p.grad.is_none() {
                p.grad = Some(vec![0.0; p.value.len()]);
            }
        }
    }
}

/// Bias-corrected Adam.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Adam {
    pub fn new(lr: f64) -> Self {
        Self {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }

    /// Applies one update to every parameter and clears the gradients.
    /// Fails without touching anything if any parameter lacks a gradient.
    pub fn step(&self, store: &mut ParamStore) -> Result<()> {
        if let Some(p) = store.params.iter().find(|p| p.grad.is_none()) {
            return Err(Error::MissingGrad(p.name.clone()));
        }
        for p in &mut store.params {
            let g = p.grad.take().expect("checked above");
            p.step_count += 1;
            let t = p.step_count as i32;
            let bc1 = 1.0 - self.beta1.powi(t);
            let bc2 = 1.0 - self.beta2.powi(t);
            let data = p.value.data_mut();
            for i in 0..data.len() {
                let m = self.beta1 * p.adam_m[i] + (1.0 - self.beta1) * g[i];
                let v = self.beta2 * p.adam_v[i] + (1.0 - self.beta2) * g[i] * g[i];
                p.adam_m[i] = m;
                p.adam_v[i] = v;
                let mh = m / bc1;
                let vh = v / bc2;
                data[i] -= self.lr * mh / (vh.sqrt() + self.eps);
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn store_with(value: f64) -> (ParamStore, ParamId) {
        let mut s = ParamStore::new();
        let id = s.add("w", Tensor::scalar(value)).unwrap();
        (s, id)
    }

    #[test]
    fn first_step_moves_by_lr_against_sign() {
        let (mut s, id) = store_with(1.0);
        s.get_mut(id).accumulate_grad(&[0.37]);
        Adam::new(0.01).step(&mut s).unwrap();
        let w = s.get(id).value().item();
        assert!((w - (1.0 - 0.01)).abs() < 1e-6, "{w}");
        assert!(s.get(id).grad().is_none());

        let (mut s, id) = store_with(1.0);
        s.get_mut(id).accumulate_grad(&[-5.0]);
        Adam::new(0.01).step(&mut s).unwrap();
        assert!((s.get(id).value().item() - 1.01).abs() < 1e-6);
    }

    #[test]
    fn zero_grad_leaves_parameter() {
        let (mut s, id) = store_with(2.5);
        s.get_mut(id).accumulate_grad(&[0.0]);
        Adam::new(0.1).step(&mut s).unwrap();
        assert_eq!(s.get(id).value().item(), 2.5);
    }

    #[test]
    fn two_steps_constant_grad_move_monotonically() {
        // direct simulation of the update rule
        let (lr, b1, b2, eps, g) = (0.05, 0.9f64, 0.999f64, 1e-8, 0.8);
        let (mut m, mut v, mut w) = (0.0, 0.0, 3.0);
        let mut expected = vec![];
        for t in 1..=2 {
            m = b1 * m + (1.0 - b1) * g;
            v = b2 * v + (1.0 - b2) * g * g;
            w -= lr * (m / (1.0 - b1.powi(t))) / ((v / (1.0 - b2.powi(t))).sqrt() + eps);
            expected.push(w);
        }
        let (mut s, id) = store_with(3.0);
        let mut seen = vec![];
        for _ in 0..2 {
            s.get_mut(id).accumulate_grad(&[g]);
            Adam::new(lr).step(&mut s).unwrap();
            seen.push(s.get(id).value().item());
        }
        assert!(seen[0] < 3.0 && seen[1] < seen[0]);
        for (a, b) in seen.iter().zip(&expected) {
            assert!((a - b).abs() < 1e-15);
        }
    }

    #[test]
    fn missing_grad_is_an_error() {
        let (mut s, _) = store_with(1.0);
        assert!(matches!(Adam::new(0.1).step(&mut s), Err(Error::MissingGrad(_))));
    }

    #[test]
    fn clip_rescales_to_max_norm() {
        let mut s = ParamStore::new();
        let a = s.add("a", Tensor::zeros(&[2])).unwrap();
        s.get_mut(a).accumulate_grad(&[30.0, 40.0]);
        let before = s.clip_grad_norm(10.0);
        assert_eq!(before, 50.0);
        assert!((s.grad_norm() - 10.0).abs() < 1e-12);
    }

    #[test]
    fn duplicate_names_rejected() {
        let mut s = ParamStore::new();
        s.add("x", Tensor::scalar(0.0)).unwrap();
        assert!(s.add("x", Tensor::scalar(0.0)).is_err());
    }
}

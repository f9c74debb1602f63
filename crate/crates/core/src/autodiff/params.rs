use alloc::collections::BTreeMap;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;
use core::sync::atomic::{AtomicU64, Ordering};

#[allow(unused_imports)]
use num_traits::Float;

use super::{Graph, Tensor};
use crate::error::{invalid, Error, Result};

static NEXT_UID: AtomicU64 = AtomicU64::new(1);

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct ParamId(usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone)]
struct Entry {
    name: String,
    value: Tensor,
    grad: Vec<f64>,
    m: Vec<f64>,
    v: Vec<f64>,
}

/// Named trainable arrays with their Adam moment buffers.
#[derive(Debug)]
pub struct ParamStore {
    entries: Vec<Entry>,
    index: BTreeMap<String, usize>,
    frozen: bool,
    step: u64,
    uid: u64,
}

impl Clone for ParamStore {
    fn clone(&self) -> Self {
        Self {
            entries: self.entries.clone(),
            index: self.index.clone(),
            frozen: self.frozen,
            step: self.step,
            uid: NEXT_UID.fetch_add(1, Ordering::Relaxed),
        }
    }
}

impl Default for ParamStore {
    fn default() -> Self {
        Self::new()
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 0.01,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

impl ParamStore {
    pub fn new() -> Self {
        Self {
            entries: Vec::new(),
            index: BTreeMap::new(),
            frozen: false,
            step: 0,
            uid: NEXT_UID.fetch_add(1, Ordering::Relaxed),
        }
    }

    pub(crate) fn uid(&self) -> u64 {
        self.uid
    }

    pub fn add(&mut self, name: &str, value: Tensor) -> Result<ParamId> {
        if self.index.contains_key(name) {
            return Err(invalid(alloc::format!("duplicate parameter name `{name}`")));
        }
        let n = value.numel();
        self.entries.push(Entry {
            name: name.into(),
            value,
            grad: vec![0.0; n],
            m: vec![0.0; n],
            v: vec![0.0; n],
        });
        let id = self.entries.len() - 1;
        self.index.insert(name.into(), id);
        Ok(ParamId(id))
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn id(&self, name: &str) -> Result<ParamId> {
        self.index.get(name).map(|&i| ParamId(i)).ok_or_else(|| Error::UnknownParam(name.into()))
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.entries.len()).map(ParamId)
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.entries[id.0].name
    }

    pub fn value(&self, id: ParamId) -> &Tensor {
        &self.entries[id.0].value
    }

    pub fn value_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.entries[id.0].value
    }

    pub fn grad(&self, id: ParamId) -> &[f64] {
        &self.entries[id.0].grad
    }

    /// Replaces the value of an existing parameter, keeping its shape.
    pub fn set_value(&mut self, name: &str, value: Tensor) -> Result<()> {
        let id = self.id(name)?;
        let cur = &self.entries[id.0].value;
        if cur.shape() != value.shape() {
            return Err(Error::ShapeMismatch {
                op: "set_value",
                left: cur.shape().to_vec(),
                right: value.shape().to_vec(),
            });
        }
        self.entries[id.0].value = value;
        Ok(())
    }

    /// Exact number of trainable scalars.
    pub fn num_params(&self) -> usize {
        self.entries.iter().map(|e| e.value.numel()).sum()
    }

    pub fn is_frozen(&self) -> bool {
        self.frozen
    }

    pub fn freeze(&mut self) {
        self.frozen = true;
    }

    pub fn unfreeze(&mut self) {
        self.frozen = false;
    }

    pub fn steps_taken(&self) -> u64 {
        self.step
    }

    pub fn zero_grad(&mut self) {
        for e in &mut self.entries {
            e.grad.iter_mut().for_each(|g| *g = 0.0);
        }
    }

    /// Adds the gradients accumulated in `graph` for this store's leaves.
    pub fn absorb(&mut self, graph: &Graph) {
        for &(id, var) in graph.param_leaves() {
            if let Some(g) = graph.grad(var) {
                for (acc, &x) in self.entries[id.0].grad.iter_mut().zip(g) {
                    *acc += x;
                }
            }
        }
    }

    pub fn scale_grads(&mut self, s: f64) {
        for e in &mut self.entries {
            e.grad.iter_mut().for_each(|g| *g *= s);
        }
    }

    pub fn grad_norm(&self) -> f64 {
        self.entries.iter().flat_map(|e| e.grad.iter()).map(|g| g * g).sum::<f64>().sqrt()
    }

    pub fn grads_finite(&self) -> bool {
        self.entries.iter().flat_map(|e| e.grad.iter()).all(|g| g.is_finite())
    }

    /// Rescales gradients so their global norm is at most `max_norm`.
    pub fn clip_grad_norm(&mut self, max_norm: f64) -> f64 {
        let n = self.grad_norm();
        if max_norm > 0.0 && n > max_norm {
            self.scale_grads(max_norm / n);
        }
        n
    }

    /// One bias-corrected Adam update from the accumulated gradients. Does
    /// nothing on a frozen store.
    pub fn adam_step(&mut self, cfg: AdamConfig) {
        if self.frozen {
            return;
        }
        self.step += 1;
        let t = self.step as f64;
        let bc1 = 1.0 - cfg.beta1.powf(t);
        let bc2 = 1.0 - cfg.beta2.powf(t);
        for e in &mut self.entries {
            let data = e.value.data_mut();
            for k in 0..data.len() {
                let g = e.grad[k];
                e.m[k] = cfg.beta1 * e.m[k] + (1.0 - cfg.beta1) * g;
                e.v[k] = cfg.beta2 * e.v[k] + (1.0 - cfg.beta2) * g * g;
                let mhat = e.m[k] / bc1;
                let vhat = e.v[k] / bc2;
                data[k] -= cfg.lr * mhat / (vhat.sqrt() + cfg.eps);
            }
        }
    }

    /// Copies values (not optimizer state) of every parameter present in both
    /// stores.
    pub fn copy_values_from(&mut self, other: &ParamStore) {
        for e in &mut self.entries {
            if let Some(&j) = other.index.get(&e.name) {
                if other.entries[j].value.shape() == e.value.shape() {
                    e.value = other.entries[j].value.clone();
                }
            }
        }
    }
}

/// Learning rate at `step` of `total`: linear warmup from `0.1 lr` to `lr`
/// over the first `warmup_frac` of the steps, then cosine decay to `0.01 lr`.
pub fn one_cycle_lr(step: usize, total: usize, lr: f64, warmup_frac: f64) -> f64 {
    let total = total.max(1);
    let warm = ((total as f64) * warmup_frac).ceil() as usize;
    if step < warm {
        return lr * (0.1 + 0.9 * step as f64 / warm as f64);
    }
    let span = (total - warm).max(1) as f64;
    let p = ((step - warm) as f64 / span).min(1.0);
    let floor = 0.01 * lr;
    floor + (lr - floor) * 0.5 * (1.0 + (core::f64::consts::PI * p).cos())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn store_with(v: f64) -> (ParamStore, ParamId) {
        let mut s = ParamStore::new();
        let id = s.add("w", Tensor::scalar(v)).unwrap();
        (s, id)
    }

    #[test]
    fn zero_gradient_leaves_parameters() {
        let (mut s, id) = store_with(1.5);
        for _ in 0..10 {
            s.adam_step(AdamConfig::default());
        }
        assert_eq!(s.value(id).item(), 1.5);
    }

    #[test]
    fn first_step_moves_by_lr() {
        let (mut s, id) = store_with(0.0);
        s.entries[0].grad[0] = 1.0;
        s.adam_step(AdamConfig::default());
        // m_hat = 1, v_hat = 1 after bias correction.
        let expected = -0.01 / (1.0 + 1e-8);
        assert!((s.value(id).item() - expected).abs() < 1e-15);
    }

    #[test]
    fn constant_gradient_descends() {
        let (mut s, id) = store_with(0.0);
        for _ in 0..100 {
            s.zero_grad();
            s.entries[0].grad[0] = -2.0;
            s.adam_step(AdamConfig::default());
        }
        assert!(s.value(id).item() > 0.5);
    }

    #[test]
    fn frozen_store_does_not_move() {
        let (mut s, id) = store_with(1.0);
        s.entries[0].grad[0] = 1.0;
        s.freeze();
        s.adam_step(AdamConfig::default());
        assert_eq!(s.value(id).item(), 1.0);
    }

    #[test]
    fn counts_and_names() {
        let mut s = ParamStore::new();
        s.add("a", Tensor::zeros(&[3, 4])).unwrap();
        s.add("b", Tensor::zeros(&[5])).unwrap();
        assert!(s.add("a", Tensor::zeros(&[1])).is_err());
        assert_eq!(s.num_params(), 17);
        assert_eq!(s.name(s.id("b").unwrap()), "b");
        assert!(s.id("c").is_err());
    }

    #[test]
    fn schedule_shape() {
        let total = 100;
        assert!((one_cycle_lr(0, total, 1.0, 0.1) - 0.1).abs() < 1e-12);
        assert!((one_cycle_lr(10, total, 1.0, 0.1) - 1.0).abs() < 1e-12);
        assert!((one_cycle_lr(100, total, 1.0, 0.1) - 0.01).abs() < 1e-12);
        let mut prev = f64::INFINITY;
        for s in 10..=100 {
            let lr = one_cycle_lr(s, total, 1.0, 0.1);
            assert!(lr <= prev + 1e-15);
            prev = lr;
        }
    }

    #[test]
    fn clipping() {
        let (mut s, _) = store_with(0.0);
        s.entries[0].grad[0] = 30.0;
        assert_eq!(s.clip_grad_norm(10.0), 30.0);
        assert!((s.grad_norm() - 10.0).abs() < 1e-12);
    }
}

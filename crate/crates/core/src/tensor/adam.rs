//! Adam with per-parameter state keyed by an arbitrary ordered key.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{shape_err, Result};

use super::array::Array;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
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

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Moments {
    pub first: Array,
    pub second: Array,
    /// Updates applied since this entry was created or reset.
    pub count: u64,
}

/// Optimizer state. Moments are created lazily on the first update of a key
/// and can be dropped per key or per predicate.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState<K: Ord + Clone> {
    pub config: AdamConfig,
    moments: BTreeMap<K, Moments>,
    steps: u64,
}

impl<K: Ord + Clone> AdamState<K> {
    pub fn new(config: AdamConfig) -> Self {
        Self {
            config,
            moments: BTreeMap::new(),
            steps: 0,
        }
    }

    /// Total number of updates applied, across all keys. Never decreases.
    pub fn steps(&self) -> u64 {
        self.steps
    }

    pub fn moments(&self, key: &K) -> Option<&Moments> {
        self.moments.get(key)
    }

    /// One Adam update of `param` with the configured learning rate.
    pub fn update(&mut self, key: K, param: &mut Array, grad: &Array) -> Result<()> {
        let lr = self.config.lr;
        self.update_with_lr(key, param, grad, lr)
    }

    pub fn update_with_lr(
        &mut self,
        key: K,
        param: &mut Array,
        grad: &Array,
        lr: f64,
    ) -> Result<()> {
        if !param.same_shape(grad) {
            return shape_err(format!(
                "adam: parameter {:?} vs gradient {:?}",
                param.shape(),
                grad.shape()
            ));
        }
        let AdamConfig {
            beta1, beta2, eps, ..
        } = self.config;
        let entry = self.moments.entry(key).or_insert_with(|| Moments {
            first: Array::zeros(param.shape()),
            second: Array::zeros(param.shape()),
            count: 0,
        });
        if !entry.first.same_shape(param) {
            return shape_err(format!(
                "adam: stored moments {:?} vs parameter {:?}",
                entry.first.shape(),
                param.shape()
            ));
        }
        entry.count += 1;
        self.steps += 1;
        let bc1 = 1.0 - beta1.powi(entry.count as i32);
        let bc2 = 1.0 - beta2.powi(entry.count as i32);
        let m = entry.first.data_mut();
        let v = entry.second.data_mut();
        for (i, (p, &g)) in param.data_mut().iter_mut().zip(grad.data()).enumerate() {
            m[i] = beta1 * m[i] + (1.0 - beta1) * g;
            v[i] = beta2 * v[i] + (1.0 - beta2) * g * g;
            let m_hat = m[i] / bc1;
            let v_hat = v[i] / bc2;
            *p -= lr * m_hat / (v_hat.sqrt() + eps);
        }
        Ok(())
    }

    pub fn forget(&mut self, key: &K) {
        self.moments.remove(key);
    }

    /// Drops the state of every key matching `pred`, leaving the rest intact.
    pub fn reset_where(&mut self, pred: impl Fn(&K) -> bool) {
        self.moments.retain(|k, _| !pred(k));
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_gradient_leaves_params() {
        let mut adam = AdamState::<u8>::new(AdamConfig::default());
        let mut p = Array::vector(vec![1.0, -2.0, 3.0]);
        adam.update(0, &mut p, &Array::zeros(&[3])).unwrap();
        assert_eq!(p.data(), &[1.0, -2.0, 3.0]);
    }

    #[test]
    fn first_step_is_signed_learning_rate() {
        // m_hat = g and v_hat = g^2 after bias correction, so the step is
        // lr * g / (|g| + eps).
        let mut adam = AdamState::<u8>::new(AdamConfig::default());
        let g = [0.5, -3.0, 1e-3];
        let mut p = Array::zeros(&[3]);
        adam.update(0, &mut p, &Array::vector(g.to_vec())).unwrap();
        for (pi, gi) in p.data().iter().zip(g) {
            let expected = -1e-3 * gi / (gi.abs() + 1e-8);
            assert!((pi - expected).abs() < 1e-15, "{pi} vs {expected}");
            assert!((pi + 1e-3 * gi.signum()).abs() < 1e-7);
        }
    }

    #[test]
    fn scoped_reset_only_touches_matching_keys() {
        let mut adam = AdamState::<(u8, u8)>::new(AdamConfig::default());
        let mut a = Array::zeros(&[2]);
        let mut s = Array::zeros(&[2]);
        let g = Array::vector(vec![1.0, 2.0]);
        adam.update((0, 0), &mut a, &g).unwrap();
        adam.update((1, 0), &mut s, &g).unwrap();
        let before = adam.moments(&(0, 0)).cloned();
        adam.reset_where(|k| k.0 == 1);
        assert!(adam.moments(&(1, 0)).is_none());
        assert_eq!(adam.moments(&(0, 0)).cloned(), before);
        assert_eq!(adam.steps(), 2);
    }

    #[test]
    fn shape_mismatch_errors() {
        let mut adam = AdamState::<u8>::new(AdamConfig::default());
        let mut p = Array::zeros(&[3]);
        assert!(adam.update(0, &mut p, &Array::zeros(&[2])).is_err());
    }
}

//! Adam with an exponential per-epoch learning-rate decay.

use serde::{Deserialize, Serialize};

use crate::nn::graph::Mat;
use crate::nn::params::{ParamId, ParamStore};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub decay_per_epoch: f64,
}

impl Default for AdamConfig {
    fn default() -> AdamConfig {
        AdamConfig {
            lr: 1e-2,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            decay_per_epoch: 0.95,
        }
    }
}

impl AdamConfig {
    pub fn lr_at(&self, epoch: usize) -> f64 {
        self.lr * self.decay_per_epoch.powi(epoch as i32)
    }
}

#[derive(Debug, Clone)]
pub struct Adam {
    pub config: AdamConfig,
    m: Vec<Option<Mat>>,
    v: Vec<Option<Mat>>,
    t: Vec<u32>,
}

impl Adam {
    pub fn new(config: AdamConfig, store: &ParamStore) -> Adam {
        Adam {
            config,
            m: vec![None; store.len()],
            v: vec![None; store.len()],
            t: vec![0; store.len()],
        }
    }

    /// Applies one update. Locked tensors are skipped even if a gradient is
    /// supplied for them.
    pub fn step(&mut self, store: &mut ParamStore, grads: &[(ParamId, Mat)], lr: f64) {
        let c = self.config;
        for (id, g) in grads {
            if store.is_locked(*id) {
                continue;
            }
            let i = id.0;
            let m = self.m[i].get_or_insert_with(|| Mat::zeros(g.dim()));
            let v = self.v[i].get_or_insert_with(|| Mat::zeros(g.dim()));
            self.t[i] += 1;
            let t = self.t[i] as i32;
            let bc1 = 1.0 - c.beta1.powi(t);
            let bc2 = 1.0 - c.beta2.powi(t);
            let p = store.value_mut(*id);
            ndarray::Zip::from(p)
                .and(m)
                .and(v)
                .and(g)
                .for_each(|p, m, v, &g| {
                    *m = c.beta1 * *m + (1.0 - c.beta1) * g;
                    *v = c.beta2 * *v + (1.0 - c.beta2) * g * g;
                    let mh = *m / bc1;
                    let vh = *v / bc2;
                    *p -= lr * mh / (vh.sqrt() + c.eps);
                });
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    #[test]
    fn first_step_moves_by_lr() {
        let mut s = ParamStore::new();
        let id = s.insert("w", array![[1.0, -1.0]]);
        let mut adam = Adam::new(AdamConfig::default(), &s);
        adam.step(&mut s, &[(id, array![[2.0, -0.5]])], 0.1);
        let v = s.value(id);
        assert!((v[[0, 0]] - 0.9).abs() < 1e-6);
        assert!((v[[0, 1]] + 0.9).abs() < 1e-6);
    }

    #[test]
    fn zero_lr_and_locks_leave_bits_unchanged() {
        let mut s = ParamStore::new();
        let a = s.insert("a", array![[0.3]]);
        let b = s.insert("b", array![[0.7]]);
        s.set_locked(b, true);
        let before = s.clone();
        let mut adam = Adam::new(AdamConfig::default(), &s);
        adam.step(&mut s, &[(a, array![[1.0]]), (b, array![[1.0]])], 0.0);
        assert_eq!(s, before);
        adam.step(&mut s, &[(a, array![[1.0]]), (b, array![[1.0]])], 0.1);
        assert_eq!(s.value(b), before.value(b));
        assert_ne!(s.value(a), before.value(a));
    }

    #[test]
    fn lr_schedule() {
        let c = AdamConfig::default();
        assert_eq!(c.lr_at(0), 1e-2);
        assert!((c.lr_at(2) - 1e-2 * 0.9025).abs() < 1e-15);
    }
}

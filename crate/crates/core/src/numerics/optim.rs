//! Adam with decoupled weight decay and the linear warmup / linear decay
//! learning-rate schedule.

use super::tape::ParamStore;
use super::tensor::Tensor;
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.01,
        }
    }
}

#[derive(Clone, Debug)]
pub struct Adam {
    pub config: AdamConfig,
    step: u64,
    first: Vec<Tensor>,
    second: Vec<Tensor>,
}

impl Adam {
    pub fn new(config: AdamConfig, store: &ParamStore) -> Result<Self> {
        let c = &config;
        if !(c.beta1 >= 0.0 && c.beta1 < 1.0 && c.beta2 >= 0.0 && c.beta2 < 1.0) {
            return Err(Error::InvalidArgument(format!(
                "Adam betas must lie in [0, 1), got {} and {}",
                c.beta1, c.beta2
            )));
        }
        if c.eps <= 0.0 || c.weight_decay < 0.0 {
            return Err(Error::InvalidArgument("Adam eps must be positive, weight decay non-negative".into()));
        }
        let zeros = || store.iter().map(|(_, p)| Tensor::zeros(p.value.shape())).collect();
        Ok(Adam {
            config,
            step: 0,
            first: zeros(),
            second: zeros(),
        })
    }

    pub fn steps_taken(&self) -> u64 {
        self.step
    }

    /// One update using the gradients currently held by `store`. Frozen
    /// parameters are left untouched. Gradients are not cleared.
    pub fn step(&mut self, store: &mut ParamStore, lr: f64) -> Result<()> {
        if lr < 0.0 {
            return Err(Error::InvalidArgument(format!("negative learning rate {lr}")));
        }
        if store.len() != self.first.len() {
            return Err(Error::InvalidArgument("parameter store changed under the optimizer".into()));
        }
        self.step += 1;
        let AdamConfig {
            beta1,
            beta2,
            eps,
            weight_decay,
        } = self.config;
        let bc1 = 1.0 - beta1.powi(self.step as i32);
        let bc2 = 1.0 - beta2.powi(self.step as i32);
        for (i, p) in store.iter_mut().enumerate() {
            if !p.trainable {
                continue;
            }
            let m = self.first[i].data_mut();
            let v = self.second[i].data_mut();
            let g = p.grad.data();
            for (j, w) in p.value.data_mut().iter_mut().enumerate() {
                m[j] = beta1 * m[j] + (1.0 - beta1) * g[j];
                v[j] = beta2 * v[j] + (1.0 - beta2) * g[j] * g[j];
                let mhat = m[j] / bc1;
                let vhat = v[j] / bc2;
                *w -= lr * (mhat / (vhat.sqrt() + eps) + weight_decay * *w);
            }
        }
        Ok(())
    }
}

/// Linear warmup from 0 to `peak` over the first `warmup_steps`, then linear
/// decay to 0 at `total_steps`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LinearWarmupDecay {
    pub peak: f64,
    pub total_steps: usize,
    pub warmup_steps: usize,
}

impl LinearWarmupDecay {
    pub fn new(peak: f64, total_steps: usize, warmup_frac: f64) -> Result<Self> {
        if total_steps == 0 {
            return Err(Error::InvalidArgument("schedule needs at least one step".into()));
        }
        if !(0.0..=1.0).contains(&warmup_frac) || peak < 0.0 {
            return Err(Error::InvalidArgument(format!(
                "warmup fraction {warmup_frac} outside [0, 1] or negative peak {peak}"
            )));
        }
        Ok(LinearWarmupDecay {
            peak,
            total_steps,
            warmup_steps: (warmup_frac * total_steps as f64).round() as usize,
        })
    }

    pub fn lr_at(&self, step: usize) -> f64 {
        let step = step.min(self.total_steps);
        if step < self.warmup_steps {
            self.peak * (step as f64 / self.warmup_steps as f64)
        } else if self.total_steps == self.warmup_steps {
            self.peak
        } else {
            self.peak * ((self.total_steps - step) as f64 / (self.total_steps - self.warmup_steps) as f64)
        }
    }
}

pub fn lr_schedule(step: usize, total: usize, warmup_frac: f64, peak: f64) -> Result<f64> {
    Ok(LinearWarmupDecay::new(peak, total, warmup_frac)?.lr_at(step))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn schedule_peaks_after_warmup_and_ends_at_zero() {
        let s = LinearWarmupDecay::new(1e-4, 1000, 0.1).unwrap();
        assert_eq!(s.lr_at(100), 1e-4);
        assert_eq!(s.lr_at(1000), 0.0);
        assert_eq!(s.lr_at(0), 0.0);
        assert!((s.lr_at(50) - 5e-5).abs() < 1e-15);
        assert!((s.lr_at(550) - 5e-5).abs() < 1e-15);
        assert!(lr_schedule(0, 0, 0.1, 1.0).is_err());
    }

    #[test]
    fn schedule_without_warmup_starts_at_peak() {
        let s = LinearWarmupDecay::new(2.0, 10, 0.0).unwrap();
        assert_eq!(s.lr_at(0), 2.0);
        assert_eq!(s.lr_at(5), 1.0);
    }

    #[test]
    fn zero_gradient_leaves_parameters() {
        let mut store = ParamStore::new();
        store.add("w", Tensor::new(&[2], vec![1.5, -0.5]).unwrap(), true).unwrap();
        let cfg = AdamConfig {
            weight_decay: 0.0,
            ..AdamConfig::default()
        };
        let mut adam = Adam::new(cfg, &store).unwrap();
        adam.step(&mut store, 1e-3).unwrap();
        assert_eq!(store.value(store.id("w").unwrap()).data(), &[1.5, -0.5]);
    }

    #[test]
    fn first_step_moves_by_lr_against_gradient_sign() {
        let mut store = ParamStore::new();
        let id = store.add("w", Tensor::new(&[2], vec![0.0, 0.0]).unwrap(), true).unwrap();
        store.get_mut(id).grad = Tensor::new(&[2], vec![3.0, -0.2]).unwrap();
        let cfg = AdamConfig {
            weight_decay: 0.0,
            eps: 1e-12,
            ..AdamConfig::default()
        };
        let mut adam = Adam::new(cfg, &store).unwrap();
        adam.step(&mut store, 0.1).unwrap();
        let w = store.value(id).data();
        assert!((w[0] + 0.1).abs() < 1e-9 && (w[1] - 0.1).abs() < 1e-9, "{w:?}");
    }

    #[test]
    fn frozen_parameters_do_not_move() {
        let mut store = ParamStore::new();
        let id = store.add("w", Tensor::new(&[1], vec![1.0]).unwrap(), false).unwrap();
        store.get_mut(id).grad = Tensor::new(&[1], vec![1.0]).unwrap();
        let mut adam = Adam::new(AdamConfig::default(), &store).unwrap();
        adam.step(&mut store, 0.5).unwrap();
        assert_eq!(store.value(id).data(), &[1.0]);
    }

    #[test]
    fn decoupled_weight_decay_shrinks_without_gradient() {
        let mut store = ParamStore::new();
        let id = store.add("w", Tensor::new(&[1], vec![2.0]).unwrap(), true).unwrap();
        let mut adam = Adam::new(AdamConfig::default(), &store).unwrap();
        adam.step(&mut store, 0.1).unwrap();
        assert!((store.value(id).data()[0] - (2.0 - 0.1 * 0.01 * 2.0)).abs() < 1e-15);
    }
}

use serde::{Deserialize, Serialize};

use super::params::ParamStore;
use super::tape::Grads;
use super::tensor::Tensor2;
use crate::error::{Error, Result};

/// Optimizer hyperparameters.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OptimConfig {
    pub lr: f64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub warmup_steps: usize,
    pub clip_norm: f64,
}

impl Default for OptimConfig {
    fn default() -> Self {
        Self {
            lr: 3e-4,
            weight_decay: 1e-2,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            warmup_steps: 1000,
            clip_norm: 1.0,
        }
    }
}

impl OptimConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::Config(format!("lr must be positive, got {}", self.lr)));
        }
        if self.weight_decay < 0.0 || self.clip_norm <= 0.0 {
            return Err(Error::Config(
                "weight_decay must be >= 0 and clip_norm > 0".into(),
            ));
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return Err(Error::Config("betas must lie in [0, 1)".into()));
        }
        Ok(())
    }
}

/// Epoch/batch settings shared by the training loops.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub optim: OptimConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 15,
            batch_size: 8,
            optim: OptimConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 || self.batch_size == 0 {
            return Err(Error::Config("epochs and batch_size must be positive".into()));
        }
        self.optim.validate()
    }
}

/// Linear warmup to the peak rate, then linear decay to zero at `total_steps`.
pub fn scheduled_lr(cfg: &OptimConfig, step: usize, total_steps: usize) -> f64 {
    let warm = cfg.warmup_steps;
    if step < warm {
        return cfg.lr * (step + 1) as f64 / warm as f64;
    }
    if total_steps <= warm {
        return cfg.lr;
    }
    let left = total_steps.saturating_sub(step) as f64;
    cfg.lr * left / (total_steps - warm) as f64
}

/// Rescales `grads` in place so their global norm is at most `max_norm`.
/// Returns the norm before clipping.
pub fn clip_global_norm(grads: &mut Grads, max_norm: f64) -> f64 {
    let norm = grads.global_norm();
    if norm > max_norm {
        grads.scale(max_norm / norm);
    }
    norm
}

/// AdamW with decoupled weight decay.
#[derive(Clone, Debug)]
pub struct AdamW {
    pub cfg: OptimConfig,
    pub total_steps: usize,
    step: usize,
    m: Vec<Tensor2>,
    v: Vec<Tensor2>,
}

#[derive(Clone, Copy, Debug)]
pub struct StepInfo {
    pub lr: f64,
    pub grad_norm: f64,
}

impl AdamW {
    pub fn new(cfg: OptimConfig, params: &ParamStore, total_steps: usize) -> Self {
        let zeros = || {
            params
                .tensors()
                .iter()
                .map(|t| Tensor2::zeros(t.rows(), t.cols()))
                .collect()
        };
        Self {
            cfg,
            total_steps,
            step: 0,
            m: zeros(),
            v: zeros(),
        }
    }

    pub fn steps_taken(&self) -> usize {
        self.step
    }

    /// Clips, then applies one update. Non-finite gradients abort without
    /// touching the parameters.
    pub fn step(&mut self, params: &mut ParamStore, mut grads: Grads) -> Result<StepInfo> {
        if grads.params.len() != params.len() {
            return Err(Error::shape(format!(
                "{} gradients for {} parameters",
                grads.params.len(),
                params.len()
            )));
        }
        let grad_norm = clip_global_norm(&mut grads, self.cfg.clip_norm);
        if !grad_norm.is_finite() {
            return Err(Error::Numeric(format!(
                "non-finite gradient norm at step {}",
                self.step
            )));
        }
        let lr = scheduled_lr(&self.cfg, self.step, self.total_steps);
        self.step += 1;
        let t = self.step as i32;
        let (b1, b2) = (self.cfg.beta1, self.cfg.beta2);
        let bc1 = 1.0 - b1.powi(t);
        let bc2 = 1.0 - b2.powi(t);
        let decay = 1.0 - lr * self.cfg.weight_decay;
        for (i, p) in params.tensors_mut().iter_mut().enumerate() {
            let g = grads.params[i].data();
            let m = self.m[i].data_mut();
            let v = self.v[i].data_mut();
            for (j, w) in p.data_mut().iter_mut().enumerate() {
                m[j] = b1 * m[j] + (1.0 - b1) * g[j];
                v[j] = b2 * v[j] + (1.0 - b2) * g[j] * g[j];
                let mhat = m[j] / bc1;
                let vhat = v[j] / bc2;
                *w = *w * decay - lr * mhat / (vhat.sqrt() + self.cfg.eps);
            }
        }
        Ok(StepInfo { lr, grad_norm })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn store(v: f64) -> ParamStore {
        let mut s = ParamStore::new();
        s.insert("w", Tensor2::filled(2, 2, v));
        s
    }

    #[test]
    fn schedule_warms_up_then_decays_to_zero() {
        let cfg = OptimConfig {
            lr: 1.0,
            warmup_steps: 4,
            ..Default::default()
        };
        assert_eq!(scheduled_lr(&cfg, 0, 12), 0.25);
        assert_eq!(scheduled_lr(&cfg, 3, 12), 1.0);
        assert_eq!(scheduled_lr(&cfg, 4, 12), 1.0);
        assert_eq!(scheduled_lr(&cfg, 8, 12), 0.5);
        assert_eq!(scheduled_lr(&cfg, 12, 12), 0.0);
    }

    #[test]
    fn zero_gradients_only_apply_weight_decay() {
        let mut s = store(2.0);
        let cfg = OptimConfig {
            lr: 0.1,
            weight_decay: 0.5,
            warmup_steps: 1,
            ..Default::default()
        };
        let mut opt = AdamW::new(cfg, &s, 10);
        let g = Grads::zeros_like(&s);
        opt.step(&mut s, g).unwrap();
        for &v in s.tensors()[0].data() {
            assert!((v - 2.0 * (1.0 - 0.1 * 0.5)).abs() < 1e-15);
        }
    }

    #[test]
    fn clipping_rescales_to_unit_norm_direction() {
        let mut g = Grads {
            params: vec![Tensor2::from_rows(&[vec![6.0, 8.0]]).unwrap()],
        };
        let before = clip_global_norm(&mut g, 1.0);
        assert_eq!(before, 10.0);
        assert!((g.global_norm() - 1.0).abs() < 1e-15);
        assert!((g.params[0].get(0, 0) - 0.6).abs() < 1e-15);
        assert!((g.params[0].get(0, 1) - 0.8).abs() < 1e-15);
    }

    #[test]
    fn non_finite_gradients_abort() {
        let mut s = store(1.0);
        let mut opt = AdamW::new(OptimConfig::default(), &s, 10);
        let g = Grads {
            params: vec![Tensor2::filled(2, 2, f64::NAN)],
        };
        assert!(matches!(opt.step(&mut s, g), Err(Error::Numeric(_))));
        assert_eq!(s, store(1.0));
    }
}

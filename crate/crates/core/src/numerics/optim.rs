use std::f64::consts::PI;

use super::array::DArray;
use super::params::ParamStore;
use crate::error::{Error, Result};

/// AdamW with decoupled weight decay.
#[derive(Clone, Debug)]
pub struct AdamW {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    pub lr: f64,
    t: u64,
    m: Vec<DArray>,
    v: Vec<DArray>,
}

impl AdamW {
    pub fn new(store: &ParamStore, lr: f64, weight_decay: f64) -> Self {
        let zeros = || store.ids().map(|id| DArray::zeros(store.value(id).shape())).collect();
        AdamW { beta1: 0.9, beta2: 0.999, eps: 1e-8, weight_decay, lr, t: 0, m: zeros(), v: zeros() }
    }

    pub fn steps(&self) -> u64 {
        self.t
    }

    /// One update from the gradients currently held in `store`. Frozen
    /// parameters are left untouched. A non-finite gradient aborts the step
    /// before anything is modified.
    pub fn step(&mut self, store: &mut ParamStore) -> Result<()> {
        if self.m.len() != store.len() {
            return Err(Error::shape("adamw_step", "optimizer state does not match parameters"));
        }
        for id in store.ids() {
            if !store.grad(id).is_finite() {
                let g = store.grad(id).data();
                let bad = g.iter().filter(|v| !v.is_finite()).count();
                return Err(Error::NonFinite(format!(
                    "gradient of {} ({bad} of {} entries non-finite)",
                    store.name(id),
                    g.len()
                )));
            }
        }
        self.t += 1;
        let bc1 = 1.0 - self.beta1.powi(self.t as i32);
        let bc2 = 1.0 - self.beta2.powi(self.t as i32);
        let decay = 1.0 - self.lr * self.weight_decay;
        for id in store.ids() {
            if store.is_frozen(id) {
                continue;
            }
            let i = id.index();
            let g = store.grad(id).data().to_vec();
            let (m, v) = (self.m[i].data_mut(), self.v[i].data_mut());
            for ((mi, vi), gi) in m.iter_mut().zip(v.iter_mut()).zip(&g) {
                *mi = self.beta1 * *mi + (1.0 - self.beta1) * gi;
                *vi = self.beta2 * *vi + (1.0 - self.beta2) * gi * gi;
            }
            let (m, v) = (self.m[i].data(), self.v[i].data());
            let w = store.value_mut(id).data_mut();
            for ((wi, mi), vi) in w.iter_mut().zip(m).zip(v) {
                let mhat = mi / bc1;
                let vhat = vi / bc2;
                *wi = *wi * decay - self.lr * mhat / (vhat.sqrt() + self.eps);
            }
        }
        Ok(())
    }
}

/// Linear warmup followed by cosine annealing.
#[derive(Clone, Debug, PartialEq)]
pub struct ScheduleConfig {
    pub warmup_epochs: usize,
    pub base_lr: f64,
    pub total_epochs: usize,
    pub min_lr: f64,
}

impl Default for ScheduleConfig {
    fn default() -> Self {
        ScheduleConfig { warmup_epochs: 10, base_lr: 1e-4, total_epochs: 2000, min_lr: 0.0 }
    }
}

impl ScheduleConfig {
    /// Default rates over `epochs` epochs, warmup shortened if the run is shorter.
    pub fn for_epochs(epochs: usize) -> Self {
        let total = epochs.max(1);
        ScheduleConfig { total_epochs: total, warmup_epochs: 10.min(total), ..ScheduleConfig::default() }
    }

    pub fn validate(&self) -> Result<()> {
        if self.warmup_epochs > self.total_epochs {
            return Err(Error::InvalidArgument(format!(
                "warmup_epochs {} exceeds total_epochs {}",
                self.warmup_epochs, self.total_epochs
            )));
        }
        if self.min_lr > self.base_lr || self.min_lr < 0.0 {
            return Err(Error::InvalidArgument("need 0 <= min_lr <= base_lr".into()));
        }
        Ok(())
    }
}

/// Learning rate at a (possibly fractional) epoch in `[0, total_epochs)`.
pub fn lr_at(epoch: f64, cfg: &ScheduleConfig) -> Result<f64> {
    cfg.validate()?;
    if !(0.0..cfg.total_epochs as f64).contains(&epoch) {
        return Err(Error::OutOfRange(format!("epoch {epoch} outside [0, {})", cfg.total_epochs)));
    }
    let warm = cfg.warmup_epochs as f64;
    if epoch < warm {
        return Ok(cfg.base_lr * epoch / warm);
    }
    let span = (cfg.total_epochs - cfg.warmup_epochs) as f64;
    let progress = (epoch - warm) / span;
    Ok(cfg.min_lr + 0.5 * (cfg.base_lr - cfg.min_lr) * (1.0 + (PI * progress).cos()))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn one_param(w: f64, g: f64) -> ParamStore {
        let mut s = ParamStore::new();
        let id = s.add("w", DArray::scalar(w));
        s.accumulate_grad(id, &DArray::scalar(g));
        s
    }

    #[test]
    fn first_step_hand_value() {
        let mut s = one_param(1.0, 1.0);
        let mut opt = AdamW::new(&s, 0.1, 0.0);
        opt.eps = 0.0;
        opt.step(&mut s).unwrap();
        assert!((s.value(s.find("w").unwrap()).item() - 0.9).abs() < 1e-12);
    }

    #[test]
    fn zero_gradient_no_decay_is_identity() {
        let mut s = one_param(1.5, 0.0);
        let mut opt = AdamW::new(&s, 0.1, 0.0);
        opt.step(&mut s).unwrap();
        assert_eq!(s.value(s.find("w").unwrap()).item(), 1.5);
    }

    #[test]
    fn decay_only_update_is_exact() {
        let mut s = one_param(1.0, 0.0);
        let mut opt = AdamW::new(&s, 0.1, 0.01);
        opt.step(&mut s).unwrap();
        assert_eq!(s.value(s.find("w").unwrap()).item(), 1.0 * (1.0 - 0.1 * 0.01));
        assert_eq!(opt.steps(), 1);
    }

    #[test]
    fn nan_gradient_aborts_without_update() {
        let mut s = one_param(1.0, f64::NAN);
        let mut opt = AdamW::new(&s, 0.1, 0.01);
        assert!(opt.step(&mut s).is_err());
        assert_eq!(s.value(s.find("w").unwrap()).item(), 1.0);
        assert_eq!(opt.steps(), 0);
    }

    #[test]
    fn schedule_examples() {
        let cfg = ScheduleConfig { warmup_epochs: 10, base_lr: 1e-4, total_epochs: 110, min_lr: 0.0 };
        assert!((lr_at(5.0, &cfg).unwrap() - 5e-5).abs() < 1e-18);
        assert_eq!(lr_at(10.0, &cfg).unwrap(), 1e-4);
        assert!((lr_at(60.0, &cfg).unwrap() - 5e-5).abs() < 1e-18);
        assert!(lr_at(110.0, &cfg).is_err());
        assert!(lr_at(-1.0, &cfg).is_err());
    }

    #[test]
    fn schedule_validation() {
        let bad = ScheduleConfig { warmup_epochs: 20, base_lr: 1e-4, total_epochs: 10, min_lr: 0.0 };
        assert!(lr_at(0.0, &bad).is_err());
        let bad = ScheduleConfig { warmup_epochs: 1, base_lr: 1e-4, total_epochs: 10, min_lr: 1.0 };
        assert!(bad.validate().is_err());
    }
}

use super::params::{BlockInfo, ParamStore};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl AdamConfig {
    pub fn new(lr: f64) -> Self {
        Self {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }

    fn validate(&self) -> Result<()> {
        if !(self.lr > 0.0) || !self.lr.is_finite() {
            return Err(Error::config(format!(
                "learning rate must be positive, got {}",
                self.lr
            )));
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return Err(Error::config("Adam betas must lie in [0, 1)"));
        }
        if !(self.eps > 0.0) {
            return Err(Error::config("Adam eps must be positive"));
        }
        Ok(())
    }
}

/// One bias-corrected Adam update over every block. Gradients are left in
/// place; the caller zeroes them.
pub fn adam_step(store: &mut ParamStore, cfg: &AdamConfig) -> Result<()> {
    let lr = cfg.lr;
    adam_step_grouped(store, cfg, |_| Some(lr))
}

/// Adam with a per-block learning rate. Blocks mapped to `None` are skipped
/// entirely, moments included.
pub fn adam_step_grouped(
    store: &mut ParamStore,
    cfg: &AdamConfig,
    lr_for: impl Fn(&BlockInfo) -> Option<f64>,
) -> Result<()> {
    cfg.validate()?;
    let lrs: Vec<Option<f64>> = store.blocks().iter().map(&lr_for).collect();
    for lr in lrs.iter().flatten() {
        AdamConfig { lr: *lr, ..*cfg }.validate()?;
    }
    store.steps += 1;
    let t = store.steps as i32;
    let c1 = 1.0 - cfg.beta1.powi(t);
    let c2 = 1.0 - cfg.beta2.powi(t);
    let ranges: Vec<_> = store.blocks().iter().map(|b| b.range()).collect();
    for (range, lr) in ranges.into_iter().zip(lrs) {
        let Some(lr) = lr else { continue };
        for i in range {
            let g = store.grads()[i];
            let m = cfg.beta1 * store.first_moment[i] + (1.0 - cfg.beta1) * g;
            let v = cfg.beta2 * store.second_moment[i] + (1.0 - cfg.beta2) * g * g;
            store.first_moment[i] = m;
            store.second_moment[i] = v;
            let update = lr * (m / c1) / ((v / c2).sqrt() + cfg.eps);
            store.values_mut()[i] -= update;
        }
    }
    Ok(())
}

//! Denoising score matching for the base policy: minimize
//! `‖ε − ε_θ(x_t, t, c)‖²` over clean task samples.

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::diffusion::{forward_sample, sample_trajectory, DiffusionPolicy, NoisePredictor};
use crate::error::{Error, Result};
use crate::numerics::{adam_step, AdamConfig};
use crate::rng::{derive_seed, standard_normal_vec};
use crate::task::{CleanSample, SyntheticTask};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PretrainConfig {
    pub hidden: Vec<usize>,
    pub train_samples: usize,
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    /// Learning rate reached at the last epoch by cosine decay from `lr`.
    pub lr_final: f64,
    /// Decay of the exponential moving average of the weights that is
    /// installed at the end of training; `0` keeps the raw weights.
    pub ema_decay: f64,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        Self {
            hidden: vec![128, 128],
            train_samples: 16384,
            epochs: 100,
            batch_size: 32,
            lr: 1e-3,
            lr_final: 1e-3,
            ema_decay: 0.0,
        }
    }
}

/// One denoising example: clean sample, condition, timestep and noise.
#[derive(Debug, Clone)]
pub struct DenoisingExample {
    pub x0: Vec<f64>,
    pub class: usize,
    pub t: usize,
    pub eps: Vec<f64>,
}

/// Mean over the batch of the per-example mean squared noise-prediction
/// error; the gradient is accumulated into `grads`.
pub fn denoising_loss_and_grad(
    policy: &DiffusionPolicy,
    batch: &[DenoisingExample],
    grads: &mut [f64],
) -> Result<f64> {
    if batch.is_empty() {
        return Err(Error::usage("empty pretraining batch"));
    }
    let n = batch.len() as f64;
    let d = policy.dim() as f64;
    let mut total = 0.0;
    for ex in batch {
        let x_t = forward_sample(policy.schedule(), &ex.x0, ex.t, &ex.eps)?;
        let trace = policy.forward_traced(&x_t, ex.t, ex.class)?;
        let resid: Vec<f64> = trace
            .output()
            .iter()
            .zip(&ex.eps)
            .map(|(p, e)| p - e)
            .collect();
        total += resid.iter().map(|r| r * r).sum::<f64>() / d;
        let cot: Vec<f64> = resid.iter().map(|r| 2.0 * r / (d * n)).collect();
        policy.backward_noise(&trace, &cot, grads)?;
    }
    Ok(total / n)
}

pub fn sample_examples<R: Rng + ?Sized>(
    policy: &DiffusionPolicy,
    samples: &[&CleanSample],
    rng: &mut R,
) -> Vec<DenoisingExample> {
    let steps = policy.schedule().steps();
    samples
        .iter()
        .map(|s| DenoisingExample {
            x0: s.x0.clone(),
            class: s.class_id,
            t: rng.random_range(1..=steps),
            eps: standard_normal_vec(rng, s.x0.len()),
        })
        .collect()
}

/// Cosine interpolation from `lr` at epoch 0 to `lr_final` at the last epoch.
pub fn cosine_lr(cfg: &PretrainConfig, epoch: usize) -> f64 {
    if cfg.epochs <= 1 {
        return cfg.lr;
    }
    let progress = epoch as f64 / (cfg.epochs - 1) as f64;
    let w = 0.5 * (1.0 + (std::f64::consts::PI * progress).cos());
    cfg.lr_final + (cfg.lr - cfg.lr_final) * w
}

/// Trains `policy` in place and returns the mean loss of every epoch.
pub fn pretrain<R: Rng + ?Sized>(
    policy: &mut DiffusionPolicy,
    samples: &[CleanSample],
    cfg: &PretrainConfig,
    rng: &mut R,
) -> Result<Vec<f64>> {
    if cfg.batch_size == 0 {
        return Err(Error::config("pretraining batch size must be positive"));
    }
    if !(0.0..1.0).contains(&cfg.ema_decay) {
        return Err(Error::config("ema_decay must lie in [0, 1)"));
    }
    let mut ema = policy.params().values().to_vec();
    let mut order: Vec<usize> = (0..samples.len()).collect();
    let mut history = Vec::with_capacity(cfg.epochs);
    for epoch in 0..cfg.epochs {
        let adam = AdamConfig::new(cosine_lr(cfg, epoch));
        order.shuffle(rng);
        let mut sum = 0.0;
        let mut batches = 0;
        for chunk in order.chunks(cfg.batch_size) {
            let members: Vec<&CleanSample> = chunk.iter().map(|&i| &samples[i]).collect();
            let batch = sample_examples(policy, &members, rng);
            let mut grads = policy.params().grad_buffer();
            sum += denoising_loss_and_grad(policy, &batch, &mut grads)?;
            let params = policy.params_mut();
            params.zero_grads();
            params.accumulate_grads(&grads, 1.0);
            adam_step(params, &adam)?;
            let d = cfg.ema_decay;
            for (e, v) in ema.iter_mut().zip(params.values()) {
                *e = d * *e + (1.0 - d) * v;
            }
            batches += 1;
        }
        history.push(sum / batches.max(1) as f64);
    }
    if cfg.ema_decay > 0.0 {
        policy.params_mut().set_values(&ema)?;
    }
    Ok(history)
}

/// Mean oracle score per class over `n` ancestral samples per class.
/// Sample `i` of class `c` uses the seed derived from `(seed, "quality", c * n + i)`.
pub fn class_oracle_means(
    policy: &impl NoisePredictor,
    task: &SyntheticTask,
    n: usize,
    seed: u64,
) -> Result<Vec<f64>> {
    if n == 0 {
        return Err(Error::usage("need at least one sample per class"));
    }
    (0..task.classes())
        .map(|c| {
            let mut sum = 0.0;
            for i in 0..n {
                let s = derive_seed(seed, "quality", (c * n + i) as u64);
                let traj = sample_trajectory(policy, c, task.dim(), s)?;
                sum += task.oracle_score(traj.final_sample(), c)?;
            }
            Ok(sum / n as f64)
        })
        .collect()
}

/// Mean oracle score per class of `n` standard normal vectors: what a
/// policy that ignores both data and prompt would reach.
pub fn noise_oracle_means<R: Rng + ?Sized>(
    task: &SyntheticTask,
    n: usize,
    rng: &mut R,
) -> Result<Vec<f64>> {
    if n == 0 {
        return Err(Error::usage("need at least one sample per class"));
    }
    (0..task.classes())
        .map(|c| {
            let mut sum = 0.0;
            for _ in 0..n {
                sum += task.oracle_score(&standard_normal_vec(rng, task.dim()), c)?;
            }
            Ok(sum / n as f64)
        })
        .collect()
}

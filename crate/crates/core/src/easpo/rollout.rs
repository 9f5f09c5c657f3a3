use rand::Rng;

use super::{
    pool_weight, preference_step_loss, sample_candidates, AlignConfig, AlignMode, NextState,
    StepLoss,
};
use crate::diffusion::{
    check_same_schedule, log_ratio_from_means, perturb_mean, reverse_mean, DiffusionPolicy,
    LatentState, NoisePredictor,
};
use crate::easpm::{select_pair, StepScorer};
use crate::error::{Error, Result};
use crate::numerics::{adam_step, AdamConfig};
use crate::rng::{standard_normal_vec, stream};

/// Record of one pooled step of a rollout.
#[derive(Debug, Clone, PartialEq)]
pub struct PooledStep {
    /// Parent timestep; the pool members live at `t - 1`.
    pub t: usize,
    pub win_index: usize,
    pub lose_index: usize,
    /// Pool member the rollout continued from.
    pub next_index: usize,
    pub s_w: f64,
    pub s_l: f64,
    pub loss: StepLoss,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Rollout {
    pub class: usize,
    pub seed: u64,
    pub final_sample: Vec<f64>,
    pub pooled: Vec<PooledStep>,
    /// `sum_t log pi(x_{t-1} | x_t) - log pi_ref(x_{t-1} | x_t)` along the
    /// realized path; steps with zero variance contribute nothing. `None`
    /// when the rollout was not asked to track it.
    pub log_ratio_drift: Option<f64>,
}

impl Rollout {
    pub fn mean_step_loss(&self) -> f64 {
        mean_of(self.pooled.iter().map(|p| p.loss.loss))
    }
}

fn mean_of(values: impl Iterator<Item = f64>) -> f64 {
    let (sum, n) = values.fold((0.0, 0usize), |(s, n), v| (s + v, n + 1));
    if n == 0 {
        0.0
    } else {
        sum / n as f64
    }
}

/// Generates one trajectory for `prompt`, drawing candidate pools inside
/// the pooled range. With `grads`, the mean gradient of this trajectory's
/// step losses is added to it. Tracking drift costs one reference pass per
/// step and does not touch `rng`.
#[allow(clippy::too_many_arguments)]
pub fn rollout<R: Rng + ?Sized>(
    policy: &DiffusionPolicy,
    reference: &impl NoisePredictor,
    scorer: &impl StepScorer,
    cfg: &AlignConfig,
    prompt: usize,
    seed: u64,
    rng: &mut R,
    grads: Option<&mut [f64]>,
    track_drift: bool,
) -> Result<Rollout> {
    check_same_schedule(policy, reference)?;
    if !scorer.is_frozen() {
        return Err(Error::usage("alignment requires a frozen scorer"));
    }
    let steps = policy.schedule().steps();
    cfg.validate(steps)?;
    let (lo, hi) = cfg.pooled_range(steps);
    let dim = policy.dim();
    let mut x = standard_normal_vec(rng, dim);
    let tau = match cfg.mode {
        AlignMode::SingleTau => Some(rng.random_range(lo..=hi)),
        AlignMode::PerStep => None,
    };
    let mut local = grads.as_ref().map(|g| vec![0.0; g.len()]);
    let mut pooled = Vec::new();
    let mut drift = 0.0;
    for t in (1..=steps).rev() {
        let state = LatentState::new(x, t, prompt);
        let is_pooled = match tau {
            Some(tau) => t == tau,
            None => (lo..=hi).contains(&t),
        };
        let var = policy.schedule().posterior_var(t);
        let (mean, next) = if is_pooled {
            let pool = sample_candidates(policy, &state, cfg.k, rng)?;
            let pref = select_pair(scorer, &pool.candidates, t, prompt, cfg.pair_selection, rng)?;
            let weight = pool_weight(t, steps, cfg);
            let loss = preference_step_loss(
                policy,
                reference,
                &pool,
                &pref,
                weight,
                local.as_deref_mut(),
            )?;
            let next_index = match cfg.next_state {
                NextState::Random => rng.random_range(0..cfg.k),
                NextState::Win => pref.win_index,
                NextState::Lose => pref.lose_index,
            };
            pooled.push(PooledStep {
                t,
                win_index: pref.win_index,
                lose_index: pref.lose_index,
                next_index,
                s_w: pref.s_w,
                s_l: pref.s_l,
                loss,
            });
            let mut pool = pool;
            let next = pool.candidates.swap_remove(next_index);
            (pool.mean, next)
        } else {
            let mean = reverse_mean(policy, &state)?;
            let z = standard_normal_vec(rng, dim);
            let next = perturb_mean(&mean, var, &z);
            (mean, next)
        };
        if track_drift && var > 0.0 {
            let mean_ref = reverse_mean(reference, &state)?;
            drift += log_ratio_from_means(&next, &mean, &mean_ref, var)?;
        }
        x = next;
    }
    if let (Some(grads), Some(local)) = (grads, local) {
        if !pooled.is_empty() {
            let inv = 1.0 / pooled.len() as f64;
            for (g, l) in grads.iter_mut().zip(&local) {
                *g += inv * l;
            }
        }
    }
    Ok(Rollout {
        class: prompt,
        seed,
        final_sample: x,
        pooled,
        log_ratio_drift: track_drift.then_some(drift),
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct BatchOutcome {
    pub rollouts: Vec<Rollout>,
}

impl BatchOutcome {
    pub fn steps(&self) -> impl Iterator<Item = &PooledStep> {
        self.rollouts.iter().flat_map(|r| r.pooled.iter())
    }
}

/// Runs one rollout per `(prompt, seed)` job against the current policy,
/// averages the trajectory gradients and applies one optimizer step.
/// Drift is recorded on every rollout when `track_drift` is set.
/// Every job draws from its own stream, so results do not depend on how
/// jobs are partitioned.
pub fn rollout_and_update(
    policy: &mut DiffusionPolicy,
    reference: &impl NoisePredictor,
    scorer: &impl StepScorer,
    cfg: &AlignConfig,
    jobs: &[(usize, u64)],
    track_drift: bool,
) -> Result<BatchOutcome> {
    if jobs.is_empty() {
        return Err(Error::usage("empty alignment batch"));
    }
    let mut grads = policy.params().grad_buffer();
    let mut rollouts = Vec::with_capacity(jobs.len());
    for &(prompt, seed) in jobs {
        let mut rng = stream(seed, "rollout", 0);
        rollouts.push(rollout(
            policy,
            reference,
            scorer,
            cfg,
            prompt,
            seed,
            &mut rng,
            Some(&mut grads),
            track_drift,
        )?);
    }
    let params = policy.params_mut();
    params.zero_grads();
    params.accumulate_grads(&grads, 1.0 / jobs.len() as f64);
    adam_step(params, &AdamConfig::new(cfg.lr))?;
    params.zero_grads();
    Ok(BatchOutcome { rollouts })
}

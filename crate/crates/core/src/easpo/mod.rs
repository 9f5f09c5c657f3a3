//! Stepwise preference alignment: candidate pools drawn from one parent
//! latent, win/lose supervision from a frozen scorer, and a time-weighted
//! match between the policy's log-ratio gap and the scorer's reward gap.

mod align;
mod rollout;

use rand::Rng;
use serde::{Deserialize, Serialize};

pub use align::{
    align, write_batches_csv, write_metrics_csv, write_pooled_csv, write_timings_csv, AlignOutcome,
    BatchStats, EpochMetrics,
};
pub use rollout::{rollout, rollout_and_update, BatchOutcome, PooledStep, Rollout};

use crate::diffusion::{
    check_same_schedule, log_ratio_from_means, reverse_mean, DiffusionPolicy, LatentState,
    NoisePredictor, NoiseSchedule,
};
use crate::easpm::{rank_and_select, PairSelection, StepPreference, StepScorer};
use crate::error::{Error, Result};
use crate::numerics::{vector, ParamStore};
use crate::rng::standard_normal_vec;

/// Where candidate pools are drawn during a rollout.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum AlignMode {
    /// One pooled step per trajectory at a uniformly drawn timestep.
    #[default]
    SingleTau,
    /// A pool at every step of the pooled range.
    PerStep,
}

/// Which pool member the rollout continues from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum NextState {
    #[default]
    Random,
    Win,
    Lose,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AlignConfig {
    /// Number of highest-noise steps that never receive a pool.
    pub kappa: usize,
    /// Candidates per pool.
    pub k: usize,
    pub lambda: f64,
    pub eta: f64,
    pub mode: AlignMode,
    /// Trajectories per optimizer step.
    pub batch: usize,
    pub lr: f64,
    pub epochs: usize,
    pub batches_per_epoch: usize,
    pub next_state: NextState,
    pub pair_selection: PairSelection,
    /// Explicit `[lo, hi]` pooled timestep range overriding `[1, T - kappa]`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub pool_range: Option<[usize; 2]>,
}

impl Default for AlignConfig {
    /// Defaults for the default 50-step schedule.
    fn default() -> Self {
        Self::for_steps(crate::diffusion::ScheduleConfig::default().steps)
    }
}

impl AlignConfig {
    /// Defaults for a schedule of `steps` steps: `kappa = floor(steps / 4)`.
    pub fn for_steps(steps: usize) -> Self {
        Self {
            kappa: steps / 4,
            k: 4,
            lambda: 0.95,
            eta: 1.0,
            mode: AlignMode::SingleTau,
            batch: 32,
            lr: 1e-5,
            epochs: 10,
            batches_per_epoch: 40,
            next_state: NextState::Random,
            pair_selection: PairSelection::BestWorst,
            pool_range: None,
        }
    }

    pub fn validate(&self, steps: usize) -> Result<()> {
        if self.k < 2 {
            return Err(Error::config(format!(
                "k must be at least 2, got {}",
                self.k
            )));
        }
        if self.kappa >= steps {
            return Err(Error::config(format!(
                "kappa must be below T = {steps}, got {}",
                self.kappa
            )));
        }
        if !(self.lambda > 0.0 && self.lambda <= 1.0) {
            return Err(Error::config(format!(
                "lambda must lie in (0, 1], got {}",
                self.lambda
            )));
        }
        if !(self.eta > 0.0) || !self.eta.is_finite() {
            return Err(Error::config(format!(
                "eta must be positive, got {}",
                self.eta
            )));
        }
        if self.batch == 0 || self.batches_per_epoch == 0 {
            return Err(Error::config(
                "batch and batches_per_epoch must be positive",
            ));
        }
        if !(self.lr > 0.0) || !self.lr.is_finite() {
            return Err(Error::config(format!(
                "alignment lr must be positive, got {}",
                self.lr
            )));
        }
        if let Some([lo, hi]) = self.pool_range {
            if lo < 1 || lo > hi || hi > steps {
                return Err(Error::config(format!(
                    "pool_range [{lo}, {hi}] must satisfy 1 <= lo <= hi <= {steps}"
                )));
            }
        }
        Ok(())
    }

    /// Inclusive range of parent timesteps at which pools are drawn.
    pub fn pooled_range(&self, steps: usize) -> (usize, usize) {
        match self.pool_range {
            Some([lo, hi]) => (lo, hi),
            None => (1, steps - self.kappa),
        }
    }
}

/// Time weight `lambda^(T - t - 1) / eta`.
pub fn time_weight(t: usize, steps: usize, cfg: &AlignConfig) -> f64 {
    let exponent = steps as i32 - t as i32 - 1;
    cfg.lambda.powi(exponent) / cfg.eta
}

/// Weight applied to a pool drawn from parent timestep `t`. The pool's
/// members live at `t - 1`, which keeps the exponent non-negative.
pub fn pool_weight(parent_t: usize, steps: usize, cfg: &AlignConfig) -> f64 {
    time_weight(parent_t - 1, steps, cfg)
}

/// Frozen snapshot of a policy. It exposes no mutable access.
#[derive(Debug, Clone)]
pub struct ReferencePolicy(DiffusionPolicy);

impl ReferencePolicy {
    pub fn snapshot(policy: &DiffusionPolicy) -> Self {
        Self(policy.clone())
    }

    pub fn params(&self) -> &ParamStore {
        self.0.params()
    }

    pub fn policy(&self) -> &DiffusionPolicy {
        &self.0
    }
}

impl NoisePredictor for ReferencePolicy {
    fn schedule(&self) -> &NoiseSchedule {
        self.0.schedule()
    }

    fn predict_noise(&self, x: &[f64], t: usize, class: usize) -> Result<Vec<f64>> {
        self.0.predict_noise(x, t, class)
    }
}

/// `k` candidates drawn from one parent latent, with their noise draws.
#[derive(Debug, Clone, PartialEq)]
pub struct CandidatePool {
    pub parent: LatentState,
    pub mean: Vec<f64>,
    pub var: f64,
    pub candidates: Vec<Vec<f64>>,
    pub noises: Vec<Vec<f64>>,
}

pub fn sample_candidates<R: Rng + ?Sized>(
    policy: &impl NoisePredictor,
    state: &LatentState,
    k: usize,
    rng: &mut R,
) -> Result<CandidatePool> {
    if k < 2 {
        return Err(Error::config(format!("a pool needs k >= 2, got {k}")));
    }
    let mean = reverse_mean(policy, state)?;
    let var = policy.schedule().posterior_var(state.t);
    let sd = var.sqrt();
    let mut candidates = Vec::with_capacity(k);
    let mut noises = Vec::with_capacity(k);
    for _ in 0..k {
        let z = standard_normal_vec(rng, mean.len());
        candidates.push(mean.iter().zip(&z).map(|(m, n)| m + sd * n).collect());
        noises.push(z);
    }
    Ok(CandidatePool {
        parent: state.clone(),
        mean,
        var,
        candidates,
        noises,
    })
}

/// Value and pieces of one step matching loss.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepLoss {
    pub loss: f64,
    pub reward_gap: f64,
    pub log_ratio_gap: f64,
    pub weight: f64,
}

/// `(w * (rho_w - rho_l) - (s_w - s_l))^2` for a selected pair. When
/// `grads` is given the gradient with respect to the policy parameters is
/// added to it; the reward gap is a constant and the reference receives no
/// gradient.
pub fn preference_step_loss(
    policy: &DiffusionPolicy,
    reference: &impl NoisePredictor,
    pool: &CandidatePool,
    pref: &StepPreference,
    weight: f64,
    grads: Option<&mut [f64]>,
) -> Result<StepLoss> {
    check_same_schedule(policy, reference)?;
    let state = &pool.parent;
    if pref.t != state.t || pref.prompt != state.class {
        return Err(Error::usage(format!(
            "preference at (t={}, prompt={}) does not belong to a pool at (t={}, prompt={})",
            pref.t, pref.prompt, state.t, state.class
        )));
    }
    let k = pool.candidates.len();
    if pref.win_index >= k
        || pref.lose_index >= k
        || pref.win_index == pref.lose_index
        || pool.candidates[pref.win_index] != pref.win
        || pool.candidates[pref.lose_index] != pref.lose
    {
        return Err(Error::usage("win/lose pair is not drawn from this pool"));
    }
    let var = policy.schedule().posterior_var(state.t);
    let (mu, trace) = policy.reverse_mean_traced(state)?;
    let mu_ref = reverse_mean(reference, state)?;
    let rho_w = log_ratio_from_means(&pref.win, &mu, &mu_ref, var)?;
    let rho_l = log_ratio_from_means(&pref.lose, &mu, &mu_ref, var)?;
    let log_ratio_gap = rho_w - rho_l;
    let reward_gap = pref.reward_gap();
    let resid = weight * log_ratio_gap - reward_gap;
    if let Some(grads) = grads {
        let coef = 2.0 * resid * weight / var;
        let d_mean: Vec<f64> = vector::sub(&pref.win, &pref.lose)
            .into_iter()
            .map(|d| coef * d)
            .collect();
        policy.backward_mean(&trace, state.t, &d_mean, grads)?;
    }
    Ok(StepLoss {
        loss: resid * resid,
        reward_gap,
        log_ratio_gap,
        weight,
    })
}

/// Selects the best/worst pair of `pool` with the frozen scorer and
/// evaluates the matching loss at the pool's time weight.
pub fn step_loss(
    policy: &DiffusionPolicy,
    reference: &impl NoisePredictor,
    scorer: &impl StepScorer,
    pool: &CandidatePool,
    cfg: &AlignConfig,
    grads: Option<&mut [f64]>,
) -> Result<(StepPreference, StepLoss)> {
    let state = &pool.parent;
    let pref = rank_and_select(scorer, &pool.candidates, state.t, state.class)?;
    let steps = policy.schedule().steps();
    let loss = preference_step_loss(
        policy,
        reference,
        pool,
        &pref,
        pool_weight(state.t, steps, cfg),
        grads,
    )?;
    Ok((pref, loss))
}

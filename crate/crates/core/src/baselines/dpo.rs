use rand::Rng;

use super::transition;
use crate::diffusion::{
    check_same_schedule, log_ratio_from_means, reverse_mean, sample_trajectory, DiffusionPolicy,
    NoisePredictor, Trajectory,
};
use crate::easpm::preference_loss;
use crate::easpo::{pool_weight, AlignConfig};
use crate::error::{Error, Result};
use crate::numerics::{adam_step, vector, AdamConfig};
use crate::rng::{derive_seed, stream};
use crate::task::SyntheticTask;

/// Two full trajectories for one prompt, ordered by the oracle score of
/// their endpoints, and the step at which the pair is supervised.
#[derive(Debug, Clone, PartialEq)]
pub struct EndpointPair {
    pub win: Trajectory,
    pub lose: Trajectory,
    pub t: usize,
}

/// Orders `a` and `b` by their endpoint oracle scores. Equal scores carry
/// no preference and yield `None`.
pub fn endpoint_pair(
    task: &SyntheticTask,
    a: Trajectory,
    b: Trajectory,
    t: usize,
) -> Result<Option<EndpointPair>> {
    if a.class != b.class {
        return Err(Error::usage("endpoint pairs must share a prompt"));
    }
    let sa = task.oracle_score(a.final_sample(), a.class)?;
    let sb = task.oracle_score(b.final_sample(), b.class)?;
    Ok(if sa > sb {
        Some(EndpointPair { win: a, lose: b, t })
    } else if sb > sa {
        Some(EndpointPair { win: b, lose: a, t })
    } else {
        None
    })
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DpoLoss {
    pub loss: f64,
    pub log_ratio_gap: f64,
}

/// `-log sigmoid(w * (rho_w - rho_l))` with both log ratios taken at step
/// `pair.t` of their own trajectory.
pub fn endpoint_dpo_loss(
    policy: &DiffusionPolicy,
    reference: &impl NoisePredictor,
    pair: &EndpointPair,
    weight: f64,
    grads: Option<&mut [f64]>,
) -> Result<DpoLoss> {
    check_same_schedule(policy, reference)?;
    let t = pair.t;
    let var = policy.schedule().posterior_var(t);
    let (win_state, win_next) = transition(&pair.win, t)?;
    let (lose_state, lose_next) = transition(&pair.lose, t)?;
    let (mu_w, trace_w) = policy.reverse_mean_traced(win_state)?;
    let (mu_l, trace_l) = policy.reverse_mean_traced(lose_state)?;
    let rho_w = log_ratio_from_means(win_next, &mu_w, &reverse_mean(reference, win_state)?, var)?;
    let rho_l = log_ratio_from_means(lose_next, &mu_l, &reverse_mean(reference, lose_state)?, var)?;
    let gap = rho_w - rho_l;
    // The pairwise logistic loss with unit temperature on the margin w * gap.
    let loss = preference_loss(weight * gap, 0.0, 1.0)?;
    if let Some(grads) = grads {
        let d_gap = -weight / (1.0 + (weight * gap).exp());
        let d_mu_w = vector::scale(&vector::sub(win_next, &mu_w), d_gap / var);
        let d_mu_l = vector::scale(&vector::sub(lose_next, &mu_l), -d_gap / var);
        policy.backward_mean(&trace_w, t, &d_mu_w, grads)?;
        policy.backward_mean(&trace_l, t, &d_mu_l, grads)?;
    }
    Ok(DpoLoss {
        loss,
        log_ratio_gap: gap,
    })
}

/// One optimizer step on endpoint-preference pairs. Each `(prompt, seed)`
/// job rolls out two trajectories from the current policy and supervises
/// them at one uniformly drawn step. Returns the mean loss over the pairs
/// that carried a preference.
pub fn endpoint_dpo_update(
    policy: &mut DiffusionPolicy,
    reference: &impl NoisePredictor,
    task: &SyntheticTask,
    cfg: &AlignConfig,
    jobs: &[(usize, u64)],
) -> Result<f64> {
    let steps = policy.schedule().steps();
    let dim = policy.dim();
    let mut grads = policy.params().grad_buffer();
    let mut total = 0.0;
    let mut used = 0usize;
    for &(prompt, seed) in jobs {
        let a = sample_trajectory(policy, prompt, dim, derive_seed(seed, "pair", 0))?;
        let b = sample_trajectory(policy, prompt, dim, derive_seed(seed, "pair", 1))?;
        let t = stream(seed, "pair-step", 0).random_range(1..=steps);
        let Some(pair) = endpoint_pair(task, a, b, t)? else {
            continue;
        };
        let w = pool_weight(t, steps, cfg);
        total += endpoint_dpo_loss(policy, reference, &pair, w, Some(&mut grads))?.loss;
        used += 1;
    }
    if used == 0 {
        return Ok(0.0);
    }
    let params = policy.params_mut();
    params.zero_grads();
    params.accumulate_grads(&grads, 1.0 / used as f64);
    adam_step(params, &AdamConfig::new(cfg.lr))?;
    params.zero_grads();
    Ok(total / used as f64)
}

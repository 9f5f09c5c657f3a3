use crate::diffusion::{
    gaussian_log_density, sample_trajectory, DiffusionPolicy, NoisePredictor, Trajectory,
};
use crate::easpm::StepScorer;
use crate::easpo::AlignConfig;
use crate::error::{Error, Result};
use crate::numerics::{adam_step, vector, AdamConfig};
use crate::rng::derive_seed;

/// `A_i = R_i - mean(R)`, written as the mean of pairwise differences so a
/// constant reward gives exactly zero advantage.
pub fn batch_mean_advantages(rewards: &[f64]) -> Vec<f64> {
    let n = rewards.len() as f64;
    rewards
        .iter()
        .map(|ri| rewards.iter().map(|rj| ri - rj).sum::<f64>() / n)
        .collect()
}

/// Sum over the steps of `traj` of `log p(x_{t-1} | x_t)`. Deterministic
/// steps are skipped.
pub fn trajectory_log_likelihood(policy: &DiffusionPolicy, traj: &Trajectory) -> Result<f64> {
    let mut total = 0.0;
    for pair in traj.states.windows(2) {
        let var = policy.schedule().posterior_var(pair[0].t);
        if var > 0.0 {
            let (mu, _) = policy.reverse_mean_traced(&pair[0])?;
            total += gaussian_log_density(&pair[1].x, &mu, var)?;
        }
    }
    Ok(total)
}

/// Score-function surrogate `-(1/B) sum_i A_i sum_t log p(x_{t-1} | x_t)`.
/// With `grads`, its gradient is added.
pub fn policy_gradient_loss(
    policy: &DiffusionPolicy,
    trajectories: &[Trajectory],
    advantages: &[f64],
    mut grads: Option<&mut [f64]>,
) -> Result<f64> {
    if trajectories.len() != advantages.len() || trajectories.is_empty() {
        return Err(Error::usage("need one advantage per trajectory"));
    }
    let b = trajectories.len() as f64;
    let mut loss = 0.0;
    for (traj, &adv) in trajectories.iter().zip(advantages) {
        for pair in traj.states.windows(2) {
            let t = pair[0].t;
            let var = policy.schedule().posterior_var(t);
            if var <= 0.0 {
                continue;
            }
            let (mu, trace) = policy.reverse_mean_traced(&pair[0])?;
            loss -= adv * gaussian_log_density(&pair[1].x, &mu, var)? / b;
            if let Some(g) = grads.as_deref_mut() {
                if adv != 0.0 {
                    let d_mu = vector::scale(&vector::sub(&pair[1].x, &mu), -adv / (b * var));
                    policy.backward_mean(&trace, t, &d_mu, g)?;
                }
            }
        }
    }
    Ok(loss)
}

/// One optimizer step of the baselined score-function estimator. The
/// terminal reward is the frozen scorer at `t = 0`.
pub fn reward_pg_update(
    policy: &mut DiffusionPolicy,
    scorer: &impl StepScorer,
    cfg: &AlignConfig,
    jobs: &[(usize, u64)],
) -> Result<f64> {
    if !scorer.is_frozen() {
        return Err(Error::usage(
            "reward policy gradient requires a frozen scorer",
        ));
    }
    let dim = policy.dim();
    let mut trajectories = Vec::with_capacity(jobs.len());
    let mut rewards = Vec::with_capacity(jobs.len());
    for &(prompt, seed) in jobs {
        let traj = sample_trajectory(policy, prompt, dim, derive_seed(seed, "pg", 0))?;
        rewards.push(scorer.step_score(traj.final_sample(), 0, prompt)?);
        trajectories.push(traj);
    }
    let advantages = batch_mean_advantages(&rewards);
    let mut grads = policy.params().grad_buffer();
    let loss = policy_gradient_loss(policy, &trajectories, &advantages, Some(&mut grads))?;
    let params = policy.params_mut();
    params.zero_grads();
    params.accumulate_grads(&grads, 1.0);
    adam_step(params, &AdamConfig::new(cfg.lr))?;
    params.zero_grads();
    Ok(loss)
}

//! Endpoint-preference and terminal-reward baselines, evaluation against a
//! reference policy, and the ablation harness.

mod ablation;
mod dpo;
mod eval;
mod pg;

use serde::{Deserialize, Serialize};

pub use ablation::{
    run_ablation, run_variant, write_ablation_csv, write_summary_csv, AblationAxis, AblationCell,
    SeedContext, Variant,
};
pub use dpo::{endpoint_dpo_loss, endpoint_dpo_update, endpoint_pair, DpoLoss, EndpointPair};
pub use eval::{class_permutation_test, evaluate, EvalReport, MIN_EVAL_SAMPLES};
pub use pg::{
    batch_mean_advantages, policy_gradient_loss, reward_pg_update, trajectory_log_likelihood,
};

use crate::diffusion::{DiffusionPolicy, LatentState, NoisePredictor, Trajectory};
use crate::easpm::StepScorer;
use crate::easpo::{align, AlignConfig, ReferencePolicy};
use crate::error::{Error, Result};
use crate::rng::derive_seed;
use crate::task::SyntheticTask;

/// Alignment method compared by the harness.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Method {
    #[default]
    Easpo,
    EndpointDpo,
    RewardPg,
}

impl Method {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "easpo" => Ok(Self::Easpo),
            "endpoint-dpo" => Ok(Self::EndpointDpo),
            "reward-pg" => Ok(Self::RewardPg),
            other => Err(Error::config(format!("unknown method `{other}`"))),
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Self::Easpo => "easpo",
            Self::EndpointDpo => "endpoint-dpo",
            Self::RewardPg => "reward-pg",
        }
    }
}

/// Parent state at `t` and the realized `x_{t-1}` of a full trajectory.
pub(crate) fn transition(traj: &Trajectory, t: usize) -> Result<(&LatentState, &[f64])> {
    let steps = traj.states[0].t;
    if t == 0 || t > steps {
        return Err(Error::usage(format!("no transition at t = {t}")));
    }
    let i = steps - t;
    Ok((&traj.states[i], &traj.states[i + 1].x))
}

/// Trains `policy` in place with `method` under the shared budget of
/// `cfg` (epochs, batches per epoch, trajectories per batch, lr) and
/// returns the reference snapshot taken on entry.
pub fn run_method(
    method: Method,
    policy: &mut DiffusionPolicy,
    scorer: &impl StepScorer,
    task: &SyntheticTask,
    cfg: &AlignConfig,
    seed: u64,
) -> Result<ReferencePolicy> {
    if method == Method::Easpo {
        return Ok(align(policy, scorer, task, cfg, seed)?.reference);
    }
    if !scorer.is_frozen() {
        return Err(Error::usage("refusing to train against an unfrozen scorer"));
    }
    cfg.validate(policy.schedule().steps())?;
    let reference = ReferencePolicy::snapshot(policy);
    policy.params_mut().reset_optimizer();
    let classes = task.classes() as u64;
    // Endpoint pairs cost two trajectories each.
    let per_batch = match method {
        Method::EndpointDpo => (cfg.batch / 2).max(1),
        _ => cfg.batch,
    };
    let mut g = 0u64;
    for _ in 0..cfg.epochs * cfg.batches_per_epoch {
        let jobs: Vec<(usize, u64)> = (0..per_batch as u64)
            .map(|i| {
                (
                    ((g + i) % classes) as usize,
                    derive_seed(seed, method.name(), g + i),
                )
            })
            .collect();
        g += per_batch as u64;
        match method {
            Method::EndpointDpo => {
                endpoint_dpo_update(policy, &reference, task, cfg, &jobs)?;
            }
            Method::RewardPg => {
                reward_pg_update(policy, scorer, cfg, &jobs)?;
            }
            Method::Easpo => unreachable!(),
        }
    }
    Ok(reference)
}

#[cfg(test)]
mod tests;

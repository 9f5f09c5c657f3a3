use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use super::loss::{preference_loss, preference_loss_grad};
use super::scorer::{ParamGroup, Scorer};
use crate::diffusion::{forward_sample, NoiseSchedule};
use crate::error::{Error, Result};
use crate::numerics::{adam_step_grouped, AdamConfig};
use crate::rng::standard_normal_vec;
use crate::task::CleanPair;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ScorerTrainConfig {
    pub encoder_lr: f64,
    pub head_lr: f64,
    pub epochs: usize,
    pub batch_size: usize,
    /// Inclusive timestep range sampled during training.
    pub t_min: usize,
    pub t_max: usize,
    /// Noise both members of a pair with the same draw.
    pub matched_noise: bool,
}

impl Default for ScorerTrainConfig {
    /// Defaults for the default 50-step schedule.
    fn default() -> Self {
        Self::for_steps(crate::diffusion::ScheduleConfig::default().steps)
    }
}

impl ScorerTrainConfig {
    pub fn for_steps(steps: usize) -> Self {
        Self {
            encoder_lr: 1e-5,
            head_lr: 1e-3,
            epochs: 80,
            batch_size: 64,
            t_min: 1,
            t_max: steps,
            matched_noise: true,
        }
    }

    pub fn validate(&self, steps: usize) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::config("scorer batch size must be positive"));
        }
        if self.t_min > self.t_max || self.t_max > steps {
            return Err(Error::config(format!(
                "scorer timestep range [{}, {}] is not inside [0, {steps}]",
                self.t_min, self.t_max
            )));
        }
        Ok(())
    }
}

/// Noisy preference pair at one timestep.
#[derive(Debug, Clone, PartialEq)]
pub struct PreferencePair {
    pub x_t_win: Vec<f64>,
    pub x_t_lose: Vec<f64>,
    pub t: usize,
    pub prompt: usize,
}

/// Diffuses both members of a clean pair to step `t`, with one shared noise
/// draw when `matched` and two independent draws otherwise.
pub fn noise_pair<R: Rng + ?Sized>(
    schedule: &NoiseSchedule,
    pair: &CleanPair,
    t: usize,
    matched: bool,
    rng: &mut R,
) -> Result<PreferencePair> {
    let dim = pair.win.x0.len();
    let eps_w = standard_normal_vec(rng, dim);
    let eps_l = if matched {
        eps_w.clone()
    } else {
        standard_normal_vec(rng, dim)
    };
    Ok(PreferencePair {
        x_t_win: forward_sample(schedule, &pair.win.x0, t, &eps_w)?,
        x_t_lose: forward_sample(schedule, &pair.lose.x0, t, &eps_l)?,
        t,
        prompt: pair.prompt,
    })
}

/// Mean preference loss over `batch`, accumulating its gradient into `grads`.
pub fn batch_loss_and_grad(
    scorer: &Scorer,
    batch: &[PreferencePair],
    grads: &mut [f64],
) -> Result<f64> {
    if batch.is_empty() {
        return Err(Error::usage("empty scorer batch"));
    }
    let tau = scorer.temperature();
    let n = batch.len() as f64;
    let mut total = 0.0;
    for p in batch {
        let win = scorer.score_traced(&p.x_t_win, p.t, p.prompt)?;
        let lose = scorer.score_traced(&p.x_t_lose, p.t, p.prompt)?;
        total += preference_loss(win.score, lose.score, tau)?;
        let d_delta = preference_loss_grad(win.score, lose.score, tau)? / n;
        scorer.backward_score(&win, d_delta, grads)?;
        scorer.backward_score(&lose, -d_delta, grads)?;
    }
    Ok(total / n)
}

fn apply_update(scorer: &mut Scorer, cfg: &ScorerTrainConfig) -> Result<()> {
    let groups: Vec<(String, ParamGroup)> = scorer
        .params()
        .blocks()
        .iter()
        .map(|b| (b.name.clone(), scorer.group_of(&b.name)))
        .collect();
    let (enc, head) = (cfg.encoder_lr, cfg.head_lr);
    let params = scorer.params_mut()?;
    adam_step_grouped(params, &AdamConfig::new(head), |b| {
        let group = groups.iter().find(|(n, _)| *n == b.name).map(|(_, g)| *g);
        Some(match group {
            Some(ParamGroup::Encoder) => enc,
            _ => head,
        })
    })
}

/// One optimizer step on a batch of clean pairs; returns the mean loss.
///
/// Each pair gets its own uniformly drawn timestep in `[t_min, t_max]`. The
/// temperature is not trained.
pub fn train_step<R: Rng + ?Sized>(
    scorer: &mut Scorer,
    pairs: &[CleanPair],
    schedule: &NoiseSchedule,
    cfg: &ScorerTrainConfig,
    rng: &mut R,
) -> Result<f64> {
    if scorer.is_frozen() {
        return Err(Error::usage("cannot train a frozen scorer"));
    }
    cfg.validate(schedule.steps())?;
    let batch = pairs
        .iter()
        .map(|p| {
            let t = rng.random_range(cfg.t_min..=cfg.t_max);
            noise_pair(schedule, p, t, cfg.matched_noise, rng)
        })
        .collect::<Result<Vec<_>>>()?;
    let params = scorer.params_mut()?;
    params.zero_grads();
    let mut grads = params.grad_buffer();
    let loss = batch_loss_and_grad(scorer, &batch, &mut grads)?;
    let params = scorer.params_mut()?;
    params.grads_mut().copy_from_slice(&grads);
    apply_update(scorer, cfg)?;
    Ok(loss)
}

/// Full training run: `epochs` shuffled passes in mini-batches. Returns the
/// mean loss of each epoch.
pub fn train_scorer<R: Rng + ?Sized>(
    scorer: &mut Scorer,
    pairs: &[CleanPair],
    schedule: &NoiseSchedule,
    cfg: &ScorerTrainConfig,
    rng: &mut R,
) -> Result<Vec<f64>> {
    cfg.validate(schedule.steps())?;
    let mut order: Vec<usize> = (0..pairs.len()).collect();
    let mut history = Vec::with_capacity(cfg.epochs);
    for _ in 0..cfg.epochs {
        order.shuffle(rng);
        let mut sum = 0.0;
        let mut batches = 0;
        for chunk in order.chunks(cfg.batch_size) {
            let batch: Vec<CleanPair> = chunk.iter().map(|&i| pairs[i].clone()).collect();
            sum += train_step(scorer, &batch, schedule, cfg, rng)?;
            batches += 1;
        }
        history.push(sum / batches.max(1) as f64);
    }
    Ok(history)
}

/// Fraction of pairs scored in the right order at timestep `t`, with
/// matched noise. Ties count as half.
pub fn pairwise_accuracy<R: Rng + ?Sized>(
    scorer: &Scorer,
    pairs: &[CleanPair],
    schedule: &NoiseSchedule,
    t: usize,
    rng: &mut R,
) -> Result<f64> {
    if pairs.is_empty() {
        return Err(Error::usage("no pairs to evaluate"));
    }
    let mut correct = 0.0;
    for p in pairs {
        let noisy = noise_pair(schedule, p, t, true, rng)?;
        let w = scorer.score(&noisy.x_t_win, t, p.prompt)?;
        let l = scorer.score(&noisy.x_t_lose, t, p.prompt)?;
        if w > l {
            correct += 1.0;
        } else if w == l {
            correct += 0.5;
        }
    }
    Ok(correct / pairs.len() as f64)
}

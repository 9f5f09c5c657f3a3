use std::path::Path;
use std::time::Instant;

use super::{rollout_and_update, AlignConfig, PooledStep, ReferencePolicy, Rollout};
use crate::diffusion::{DiffusionPolicy, NoisePredictor};
use crate::easpm::StepScorer;
use crate::error::{Error, Result};
use crate::rng::derive_seed;
use crate::task::SyntheticTask;

/// Statistics of one optimizer step.
#[derive(Debug, Clone, PartialEq)]
pub struct BatchStats {
    pub epoch: usize,
    pub batch: usize,
    pub mean_step_loss: f64,
    pub mean_reward_gap: f64,
    pub mean_abs_logratio: f64,
}

/// One row of the alignment metric log.
#[derive(Debug, Clone, PartialEq)]
pub struct EpochMetrics {
    pub epoch: usize,
    pub mean_step_loss: f64,
    pub mean_reward_gap: f64,
    pub mean_abs_logratio: f64,
    /// Oracle score of the epoch's final samples, per prompt class.
    pub oracle_mean_per_class: Vec<f64>,
    /// Mean path log-ratio against the reference over the rollouts of the
    /// epoch's last batch.
    pub mean_logratio_drift: f64,
}

impl EpochMetrics {
    pub fn oracle_mean(&self) -> f64 {
        let n = self.oracle_mean_per_class.len().max(1) as f64;
        self.oracle_mean_per_class.iter().sum::<f64>() / n
    }

    pub fn csv_header(classes: usize) -> Vec<String> {
        let mut cols: Vec<String> = [
            "epoch",
            "mean_step_loss",
            "mean_reward_gap",
            "mean_abs_logratio",
        ]
        .iter()
        .map(|s| s.to_string())
        .collect();
        cols.extend((0..classes).map(|c| format!("oracle_mean_class{c}")));
        cols.push("oracle_mean".into());
        cols.push("mean_logratio_drift".into());
        cols
    }

    fn csv_row(&self) -> Vec<String> {
        let mut row = vec![
            self.epoch.to_string(),
            self.mean_step_loss.to_string(),
            self.mean_reward_gap.to_string(),
            self.mean_abs_logratio.to_string(),
        ];
        row.extend(self.oracle_mean_per_class.iter().map(|v| v.to_string()));
        row.push(self.oracle_mean().to_string());
        row.push(self.mean_logratio_drift.to_string());
        row
    }
}

fn write_rows(
    path: &Path,
    header: Vec<String>,
    rows: impl Iterator<Item = Vec<String>>,
) -> Result<()> {
    let csv_err = |e: csv::Error| Error::io(path, e.into());
    let mut w = csv::Writer::from_path(path).map_err(csv_err)?;
    w.write_record(header).map_err(csv_err)?;
    for row in rows {
        w.write_record(row).map_err(csv_err)?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

fn header(cols: &[&str]) -> Vec<String> {
    cols.iter().map(|s| s.to_string()).collect()
}

pub fn write_metrics_csv(path: &Path, metrics: &[EpochMetrics], classes: usize) -> Result<()> {
    write_rows(
        path,
        EpochMetrics::csv_header(classes),
        metrics.iter().map(|m| m.csv_row()),
    )
}

/// Per-epoch wall-clock seconds. Kept apart from the metric log so that the
/// metric log is byte-reproducible.
pub fn write_timings_csv(path: &Path, epoch_seconds: &[f64]) -> Result<()> {
    write_rows(
        path,
        header(&["epoch", "wall_seconds"]),
        epoch_seconds
            .iter()
            .enumerate()
            .map(|(i, s)| vec![(i + 1).to_string(), format!("{s:.3}")]),
    )
}

pub fn write_batches_csv(path: &Path, batches: &[BatchStats]) -> Result<()> {
    write_rows(
        path,
        header(&[
            "epoch",
            "batch",
            "mean_step_loss",
            "mean_reward_gap",
            "mean_abs_logratio",
        ]),
        batches.iter().map(|b| {
            vec![
                (b.epoch + 1).to_string(),
                (b.batch + 1).to_string(),
                b.mean_step_loss.to_string(),
                b.mean_reward_gap.to_string(),
                b.mean_abs_logratio.to_string(),
            ]
        }),
    )
}

pub fn write_pooled_csv(path: &Path, pooled: &[PooledStep]) -> Result<()> {
    write_rows(
        path,
        header(&[
            "t",
            "win_index",
            "lose_index",
            "next_index",
            "s_w",
            "s_l",
            "weight",
            "log_ratio_gap",
            "loss",
        ]),
        pooled.iter().map(|p| {
            vec![
                p.t.to_string(),
                p.win_index.to_string(),
                p.lose_index.to_string(),
                p.next_index.to_string(),
                p.s_w.to_string(),
                p.s_l.to_string(),
                p.loss.weight.to_string(),
                p.loss.log_ratio_gap.to_string(),
                p.loss.loss.to_string(),
            ]
        }),
    )
}

#[derive(Debug, Clone)]
pub struct AlignOutcome {
    pub reference: ReferencePolicy,
    pub epochs: Vec<EpochMetrics>,
    pub batches: Vec<BatchStats>,
    /// Every pooled step of every rollout, in execution order.
    pub pooled: Vec<PooledStep>,
    /// Wall-clock seconds of each epoch.
    pub epoch_seconds: Vec<f64>,
}

fn mean(values: impl Iterator<Item = f64>) -> f64 {
    let (sum, n) = values.fold((0.0, 0usize), |(s, n), v| (s + v, n + 1));
    if n == 0 {
        0.0
    } else {
        sum / n as f64
    }
}

/// Aligns `policy` in place against a snapshot of itself taken on entry.
///
/// Trajectory `g` (counted across the whole run) uses prompt `g mod C` and
/// the seed derived from `(seed, "align", g)`.
pub fn align(
    policy: &mut DiffusionPolicy,
    scorer: &impl StepScorer,
    task: &SyntheticTask,
    cfg: &AlignConfig,
    seed: u64,
) -> Result<AlignOutcome> {
    if !scorer.is_frozen() {
        return Err(Error::usage("refusing to align against an unfrozen scorer"));
    }
    cfg.validate(policy.schedule().steps())?;
    let classes = task.classes();
    let reference = ReferencePolicy::snapshot(policy);
    policy.params_mut().reset_optimizer();
    let mut epochs = Vec::with_capacity(cfg.epochs);
    let mut batches = Vec::new();
    let mut pooled = Vec::new();
    let mut g = 0u64;
    let mut epoch_seconds = Vec::with_capacity(cfg.epochs);
    for epoch in 0..cfg.epochs {
        let started = Instant::now();
        let mut rollouts: Vec<Rollout> = Vec::new();
        for batch in 0..cfg.batches_per_epoch {
            let jobs: Vec<(usize, u64)> = (0..cfg.batch)
                .map(|i| {
                    let idx = g + i as u64;
                    (
                        (idx % classes as u64) as usize,
                        derive_seed(seed, "align", idx),
                    )
                })
                .collect();
            g += cfg.batch as u64;
            // Drift needs a reference pass per step, so it is sampled on the
            // last batch of each epoch only.
            let track_drift = batch + 1 == cfg.batches_per_epoch;
            let out = rollout_and_update(policy, &reference, scorer, cfg, &jobs, track_drift)?;
            batches.push(BatchStats {
                epoch,
                batch,
                mean_step_loss: mean(out.steps().map(|s| s.loss.loss)),
                mean_reward_gap: mean(out.steps().map(|s| s.loss.reward_gap)),
                mean_abs_logratio: mean(out.steps().map(|s| s.loss.log_ratio_gap.abs())),
            });
            pooled.extend(out.steps().cloned());
            rollouts.extend(out.rollouts);
        }
        let steps = || rollouts.iter().flat_map(|r| r.pooled.iter());
        let mut per_class = Vec::with_capacity(classes);
        for c in 0..classes {
            let mut scores = Vec::new();
            for r in rollouts.iter().filter(|r| r.class == c) {
                scores.push(task.oracle_score(&r.final_sample, c)?);
            }
            per_class.push(mean(scores.into_iter()));
        }
        epochs.push(EpochMetrics {
            epoch: epoch + 1,
            mean_step_loss: mean(steps().map(|s| s.loss.loss)),
            mean_reward_gap: mean(steps().map(|s| s.loss.reward_gap)),
            mean_abs_logratio: mean(steps().map(|s| s.loss.log_ratio_gap.abs())),
            oracle_mean_per_class: per_class,
            mean_logratio_drift: mean(rollouts.iter().filter_map(|r| r.log_ratio_drift)),
        });
        epoch_seconds.push(started.elapsed().as_secs_f64());
    }
    Ok(AlignOutcome {
        reference,
        epochs,
        batches,
        pooled,
        epoch_seconds,
    })
}

use std::path::Path;

use super::{evaluate, run_method, EvalReport, Method};
use crate::diffusion::{DiffusionPolicy, NoisePredictor as _};
use crate::easpm::{PairSelection, Scorer};
use crate::easpo::{AlignConfig, AlignMode, NextState};
use crate::error::{Error, Result};
use crate::numerics::vector::{mean, std_dev};
use crate::task::SyntheticTask;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AblationAxis {
    TimeConditioning,
    NextState,
    K,
    TimestepRange,
    Method,
    WinLose,
}

impl AblationAxis {
    pub const ALL: [AblationAxis; 6] = [
        Self::TimeConditioning,
        Self::NextState,
        Self::K,
        Self::TimestepRange,
        Self::Method,
        Self::WinLose,
    ];

    pub fn parse(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|a| a.name() == s)
            .ok_or_else(|| {
                let known: Vec<&str> = Self::ALL.iter().map(|a| a.name()).collect();
                Error::config(format!(
                    "unknown ablation axis `{s}` (expected one of {})",
                    known.join(", ")
                ))
            })
    }

    pub fn name(self) -> &'static str {
        match self {
            Self::TimeConditioning => "time-conditioning",
            Self::NextState => "next-state",
            Self::K => "k",
            Self::TimestepRange => "timestep-range",
            Self::Method => "method",
            Self::WinLose => "win-lose",
        }
    }

    /// The sweep used when no explicit values are given. Timestep ranges
    /// rescale the 1000-step windows `[0,250]`, `[0,500]`, `[0,750]`,
    /// `[0,1000]`, `[250,750]`, `[500,750]` and `[250,500]` to `steps`,
    /// anchoring the 750 mark at the default cutoff.
    pub fn default_values(self, steps: usize) -> Vec<String> {
        let strs = |v: &[&str]| v.iter().map(|s| s.to_string()).collect();
        match self {
            Self::TimeConditioning => strs(&["on", "off"]),
            Self::NextState => strs(&["random", "win", "lose"]),
            Self::K => strs(&["2", "4", "8"]),
            Self::Method => strs(&["easpo", "endpoint-dpo", "reward-pg"]),
            Self::WinLose => strs(&["best-worst", "random-pair"]),
            Self::TimestepRange => {
                let mark = |a: usize| steps - steps * (1000 - a) / 1000;
                [
                    (0, 250),
                    (0, 500),
                    (0, 750),
                    (0, 1000),
                    (250, 750),
                    (500, 750),
                    (250, 500),
                ]
                .iter()
                .map(|&(a, b)| {
                    let lo = if a == 0 { 1 } else { mark(a) + 1 };
                    format!("{lo}-{}", mark(b))
                })
                .collect()
            }
        }
    }

    /// Applies one axis value on top of the base configuration. Every
    /// next-state cell runs in per-step mode: with a single pooled step per
    /// trajectory the continuation never reaches the loss, so the axis would
    /// have no effect.
    pub fn variant(self, value: &str, base: &AlignConfig) -> Result<Variant> {
        let mut v = Variant {
            method: Method::Easpo,
            config: base.clone(),
            time_conditioned: true,
        };
        let bad = || Error::config(format!("invalid value `{value}` for axis {}", self.name()));
        match self {
            Self::TimeConditioning => {
                v.time_conditioned = match value {
                    "on" => true,
                    "off" => false,
                    _ => return Err(bad()),
                }
            }
            Self::NextState => {
                v.config.mode = AlignMode::PerStep;
                v.config.next_state = match value {
                    "random" => NextState::Random,
                    "win" => NextState::Win,
                    "lose" => NextState::Lose,
                    _ => return Err(bad()),
                }
            }
            Self::K => v.config.k = value.parse().map_err(|_| bad())?,
            Self::TimestepRange => {
                let (lo, hi) = value.split_once('-').ok_or_else(bad)?;
                let lo = lo.trim().parse().map_err(|_| bad())?;
                let hi = hi.trim().parse().map_err(|_| bad())?;
                v.config.pool_range = Some([lo, hi]);
            }
            Self::Method => v.method = Method::parse(value)?,
            Self::WinLose => {
                v.config.pair_selection = match value {
                    "best-worst" => PairSelection::BestWorst,
                    "random-pair" => PairSelection::RandomPair,
                    _ => return Err(bad()),
                }
            }
        }
        Ok(v)
    }
}

/// One point of an ablation sweep.
#[derive(Debug, Clone, PartialEq)]
pub struct Variant {
    pub method: Method,
    pub config: AlignConfig,
    /// Train against the time-conditioned scorer (`true`) or the
    /// time-blind one.
    pub time_conditioned: bool,
}

/// Per-seed inputs shared by every cell: the pretrained policy and the
/// frozen scorers. Evaluation always uses the time-conditioned scorer.
#[derive(Debug, Clone)]
pub struct SeedContext {
    /// Root seed reported in the tables.
    pub seed: u64,
    /// Seed handed to the training method.
    pub align_seed: u64,
    /// Seed pairing evaluation samples.
    pub eval_seed: u64,
    pub pretrained: DiffusionPolicy,
    pub scorer: Scorer,
    pub time_blind_scorer: Option<Scorer>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct AblationCell {
    pub axis: String,
    pub value: String,
    pub seed: u64,
    pub report: EvalReport,
}

/// Trains a copy of the pretrained policy under `variant` and evaluates it
/// against the pretrained checkpoint.
pub fn run_variant(
    ctx: &SeedContext,
    variant: &Variant,
    task: &SyntheticTask,
    eval_per_class: usize,
    config_digest: &str,
) -> Result<EvalReport> {
    variant.config.validate(ctx.pretrained.schedule().steps())?;
    let train_scorer = if variant.time_conditioned {
        &ctx.scorer
    } else {
        ctx.time_blind_scorer
            .as_ref()
            .ok_or_else(|| Error::config("the time-conditioning axis needs a time-blind scorer"))?
    };
    let mut policy = ctx.pretrained.clone();
    let reference = run_method(
        variant.method,
        &mut policy,
        train_scorer,
        task,
        &variant.config,
        ctx.align_seed,
    )?;
    evaluate(
        &policy,
        &reference,
        &ctx.scorer,
        task,
        eval_per_class,
        ctx.eval_seed,
        config_digest,
    )
}

/// One full train-and-evaluate run per value per seed.
pub fn run_ablation(
    axis: AblationAxis,
    values: &[String],
    base: &AlignConfig,
    contexts: &[SeedContext],
    task: &SyntheticTask,
    eval_per_class: usize,
    config_digest: &str,
) -> Result<Vec<AblationCell>> {
    let variants = values
        .iter()
        .map(|v| axis.variant(v, base))
        .collect::<Result<Vec<_>>>()?;
    let mut cells = Vec::with_capacity(values.len() * contexts.len());
    for ctx in contexts {
        for (value, variant) in values.iter().zip(&variants) {
            let report = run_variant(ctx, variant, task, eval_per_class, config_digest)?;
            cells.push(AblationCell {
                axis: axis.name().to_string(),
                value: value.clone(),
                seed: ctx.seed,
                report,
            });
        }
    }
    Ok(cells)
}

pub fn write_ablation_csv(path: &Path, cells: &[AblationCell]) -> Result<()> {
    let csv_err = |e: csv::Error| Error::io(path, e.into());
    let mut w = csv::Writer::from_path(path).map_err(csv_err)?;
    w.write_record([
        "value",
        "seed",
        "oracle_mean",
        "oracle_gain",
        "win_rate",
        "scorer_mean",
        "logratio_drift",
    ])
    .map_err(csv_err)?;
    for c in cells {
        w.write_record([
            c.value.clone(),
            c.seed.to_string(),
            c.report.oracle_mean().to_string(),
            c.report.oracle_gain().to_string(),
            c.report.win_rate().to_string(),
            c.report.scorer_mean.to_string(),
            c.report.logratio_drift.to_string(),
        ])
        .map_err(csv_err)?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

/// Mean and across-seed standard deviation of every statistic, one row per
/// `(axis, value)` in order of first appearance.
pub fn write_summary_csv(path: &Path, cells: &[AblationCell]) -> Result<()> {
    let csv_err = |e: csv::Error| Error::io(path, e.into());
    let mut w = csv::Writer::from_path(path).map_err(csv_err)?;
    w.write_record([
        "axis",
        "value",
        "seeds",
        "oracle_mean_mean",
        "oracle_mean_std",
        "oracle_gain_mean",
        "oracle_gain_std",
        "win_rate_mean",
        "win_rate_std",
        "scorer_mean_mean",
        "scorer_mean_std",
        "logratio_drift_mean",
        "logratio_drift_std",
    ])
    .map_err(csv_err)?;
    let mut keys: Vec<(&str, &str)> = Vec::new();
    for c in cells {
        let key = (c.axis.as_str(), c.value.as_str());
        if !keys.contains(&key) {
            keys.push(key);
        }
    }
    for (axis, value) in keys {
        let group: Vec<&EvalReport> = cells
            .iter()
            .filter(|c| c.axis == axis && c.value == value)
            .map(|c| &c.report)
            .collect();
        let stat = |f: &dyn Fn(&EvalReport) -> f64| {
            let v: Vec<f64> = group.iter().map(|r| f(r)).collect();
            [mean(&v).to_string(), std_dev(&v).to_string()]
        };
        let mut row = vec![axis.to_string(), value.to_string(), group.len().to_string()];
        row.extend(stat(&|r| r.oracle_mean()));
        row.extend(stat(&|r| r.oracle_gain()));
        row.extend(stat(&|r| r.win_rate()));
        row.extend(stat(&|r| r.scorer_mean));
        row.extend(stat(&|r| r.logratio_drift));
        w.write_record(row).map_err(csv_err)?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

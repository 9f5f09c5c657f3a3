//! Pipeline stages behind the command-line front end.
//!
//! Every stage works inside one run directory. Opening the directory writes
//! the resolved config and its digest, and refuses a directory that already
//! belongs to a different config, so artifacts found there can be reused.

use std::fs;
use std::path::{Path, PathBuf};

use crate::baselines::{
    evaluate, run_ablation, write_ablation_csv, write_summary_csv, AblationAxis, AblationCell,
    EvalReport, SeedContext,
};
use crate::config::{RunConfig, Stage};
use crate::diffusion::{replay, sample_trajectory, DiffusionPolicy, ReplayReport, TrajectoryDump};
use crate::easpm::{pairwise_accuracy, train_scorer, Scorer};
use crate::easpo::{
    align, write_batches_csv, write_metrics_csv, write_pooled_csv, write_timings_csv, AlignOutcome,
};
use crate::error::{Error, Result};
use crate::pretrain::{class_oracle_means, noise_oracle_means, pretrain};
use crate::rng::derive_seed;
use crate::task::{CleanPair, SampleSet, SyntheticTask};

/// Samples per class behind the pretraining quality table.
pub const QUALITY_SAMPLES: usize = 200;

/// Width of the timestep bins in the scorer accuracy table.
pub const ACCURACY_BIN: usize = 5;

pub mod files {
    pub const CONFIG: &str = "config.toml";
    pub const DIGEST: &str = "config.sha256";
    pub const DENOISER: &str = "denoiser.toml";
    pub const PRETRAIN_LOSS: &str = "pretrain_loss.csv";
    pub const PRETRAIN_QUALITY: &str = "pretrain_quality.csv";
    pub const PAIRS: &str = "pairs.toml";
    pub const HELDOUT_PAIRS: &str = "heldout_pairs.toml";
    pub const SCORER: &str = "scorer.toml";
    pub const ALIGNED: &str = "aligned.toml";
    pub const ALIGN_METRICS: &str = "align_metrics.csv";
    pub const ALIGN_BATCHES: &str = "align_batches.csv";
    pub const ALIGN_POOLED: &str = "align_pooled.csv";
    pub const ALIGN_TIMINGS: &str = "align_timings.csv";
    pub const EVAL: &str = "eval.csv";

    /// File prefix of the time-conditioned or time-blind scorer.
    pub fn scorer_tag(time_conditioning: bool) -> &'static str {
        if time_conditioning {
            "scorer"
        } else {
            "scorer_time_blind"
        }
    }

    pub fn dump(class: usize) -> String {
        format!("dump_class{class}.toml")
    }

    pub fn ablation(axis: &str) -> String {
        format!("ablation_{axis}.csv")
    }

    pub fn ablation_summary(axis: &str) -> String {
        format!("ablation_{axis}_summary.csv")
    }
}

/// A run directory bound to one config digest.
#[derive(Debug, Clone)]
pub struct RunDir {
    root: PathBuf,
    digest: String,
}

impl RunDir {
    /// Opens `cfg.out_dir`.
    pub fn open(cfg: &RunConfig) -> Result<Self> {
        Self::open_at(&cfg.out_dir, cfg)
    }

    /// Creates `root` if needed and records the config there. A directory
    /// holding a run with another digest is a precondition violation.
    pub fn open_at(root: &Path, cfg: &RunConfig) -> Result<Self> {
        cfg.validate()?;
        fs::create_dir_all(root).map_err(|e| Error::io(root, e))?;
        let digest = cfg.digest()?;
        let digest_path = root.join(files::DIGEST);
        if digest_path.exists() {
            let existing =
                fs::read_to_string(&digest_path).map_err(|e| Error::io(&digest_path, e))?;
            if existing.trim() != digest {
                return Err(Error::usage(format!(
                    "{} holds a run with config digest {}, not {digest}; use a fresh output directory",
                    root.display(),
                    existing.trim()
                )));
            }
        }
        let mut resolved = cfg.clone();
        resolved.out_dir = root.to_path_buf();
        let config_path = root.join(files::CONFIG);
        fs::write(&config_path, resolved.to_toml()?).map_err(|e| Error::io(&config_path, e))?;
        fs::write(&digest_path, format!("{digest}\n")).map_err(|e| Error::io(&digest_path, e))?;
        Ok(Self {
            root: root.to_path_buf(),
            digest,
        })
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn digest(&self) -> &str {
        &self.digest
    }

    pub fn path(&self, name: &str) -> PathBuf {
        self.root.join(name)
    }
}

fn checkpoint_meta(dir: &RunDir) -> toml::Table {
    let mut meta = toml::Table::new();
    meta.insert(
        "config_digest".into(),
        toml::Value::String(dir.digest.clone()),
    );
    meta
}

fn write_csv(
    path: &Path,
    header: &[&str],
    rows: impl IntoIterator<Item = Vec<String>>,
) -> Result<()> {
    let csv_err = |e: csv::Error| Error::io(path, e.into());
    let mut w = csv::Writer::from_path(path).map_err(csv_err)?;
    w.write_record(header).map_err(csv_err)?;
    for row in rows {
        w.write_record(row).map_err(csv_err)?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

fn loss_rows(losses: &[f64]) -> impl Iterator<Item = Vec<String>> + '_ {
    losses
        .iter()
        .enumerate()
        .map(|(i, l)| vec![(i + 1).to_string(), l.to_string()])
}

pub fn load_denoiser(path: &Path) -> Result<DiffusionPolicy> {
    Ok(DiffusionPolicy::load(path)?.0)
}

/// Loads a scorer, attaching `denoiser` when the scorer was trained on
/// clean estimates.
pub fn load_scorer(path: &Path, denoiser: &DiffusionPolicy) -> Result<Scorer> {
    Scorer::load(path, Some(denoiser.clone()))
}

#[derive(Debug, Clone)]
pub struct PretrainOutcome {
    pub policy: DiffusionPolicy,
    /// Mean loss of every epoch.
    pub losses: Vec<f64>,
    /// Per-class oracle mean of the trained policy's samples.
    pub oracle_means: Vec<f64>,
    /// Per-class oracle mean of standard normal vectors.
    pub noise_means: Vec<f64>,
}

impl PretrainOutcome {
    /// Smallest per-class margin over the noise baseline.
    pub fn min_margin(&self) -> f64 {
        self.oracle_means
            .iter()
            .zip(&self.noise_means)
            .map(|(a, b)| a - b)
            .fold(f64::INFINITY, f64::min)
    }
}

/// Trains the base policy by denoising score matching and writes the
/// checkpoint, the loss curve and a per-class quality table.
pub fn cmd_pretrain(cfg: &RunConfig, dir: &RunDir) -> Result<PretrainOutcome> {
    let task = SyntheticTask::new(cfg.task.clone())?;
    let mut data_rng = cfg.stream(Stage::Task, 0);
    let samples = (0..cfg.pretrain.train_samples)
        .map(|i| Ok(task.generate_clean(task.class(i % task.classes())?, &mut data_rng)))
        .collect::<Result<Vec<_>>>()?;
    let mut policy = DiffusionPolicy::new(
        cfg.denoiser_spec(),
        cfg.schedule.clone(),
        &mut cfg.stream(Stage::Pretrain, 0),
    )?;
    let losses = pretrain(
        &mut policy,
        &samples,
        &cfg.pretrain,
        &mut cfg.stream(Stage::Pretrain, 1),
    )?;
    policy.save(&dir.path(files::DENOISER), "denoiser", checkpoint_meta(dir))?;
    write_csv(
        &dir.path(files::PRETRAIN_LOSS),
        &["epoch", "loss"],
        loss_rows(&losses),
    )?;
    let quality_seed = derive_seed(cfg.seed, Stage::Pretrain.label(), 2);
    let oracle_means = class_oracle_means(&policy, &task, QUALITY_SAMPLES, quality_seed)?;
    let noise_means =
        noise_oracle_means(&task, QUALITY_SAMPLES, &mut cfg.stream(Stage::Pretrain, 3))?;
    write_csv(
        &dir.path(files::PRETRAIN_QUALITY),
        &["class", "n", "oracle_mean", "noise_oracle_mean"],
        (0..task.classes()).map(|c| {
            vec![
                c.to_string(),
                QUALITY_SAMPLES.to_string(),
                oracle_means[c].to_string(),
                noise_means[c].to_string(),
            ]
        }),
    )?;
    Ok(PretrainOutcome {
        policy,
        losses,
        oracle_means,
        noise_means,
    })
}

/// Training pairs drawn from the task stream.
pub fn generate_pairs(cfg: &RunConfig) -> Result<Vec<CleanPair>> {
    let task = SyntheticTask::new(cfg.task.clone())?;
    let mut rng = cfg.stream(Stage::Task, 1);
    Ok((0..cfg.scorer.train_pairs)
        .map(|_| task.random_preference_pair(&mut rng))
        .collect())
}

/// Held-out pairs, disjoint in stream from the training pairs.
pub fn generate_heldout_pairs(cfg: &RunConfig) -> Result<Vec<CleanPair>> {
    let task = SyntheticTask::new(cfg.task.clone())?;
    let mut rng = cfg.stream(Stage::Task, 2);
    Ok((0..cfg.scorer.heldout_pairs)
        .map(|_| task.random_preference_pair(&mut rng))
        .collect())
}

#[derive(Debug, Clone)]
pub struct ScorerOutcome {
    pub scorer: Scorer,
    pub losses: Vec<f64>,
    /// Held-out pairwise accuracy at `t = 1..=T`, indexed by `t - 1`.
    pub accuracy: Vec<f64>,
    /// Mean accuracy over `t <= T / 2`.
    pub early_accuracy: f64,
    /// Mean accuracy over the pooled range `[1, T - kappa]`.
    pub pooled_accuracy: f64,
    /// The pooled accuracy fell below the configured floor.
    pub below_floor: bool,
}

impl ScorerOutcome {
    /// Mean accuracy over the inclusive timestep range `[lo, hi]`.
    pub fn mean_accuracy(&self, lo: usize, hi: usize) -> f64 {
        let window = &self.accuracy[lo - 1..hi];
        window.iter().sum::<f64>() / window.len() as f64
    }
}

/// Trains and freezes a scorer on a pair dataset, then reports held-out
/// accuracy per timestep bin. `pairs` defaults to the config's generated
/// dataset, which is exported to the run directory. `denoiser` is needed
/// when the scorer works on clean estimates.
pub fn cmd_train_scorer(
    cfg: &RunConfig,
    dir: &RunDir,
    denoiser: Option<&DiffusionPolicy>,
    pairs: Option<&Path>,
    time_conditioning: bool,
) -> Result<ScorerOutcome> {
    let steps = cfg.schedule.steps;
    let schedule = cfg.schedule.build()?;
    let train = match pairs {
        Some(path) => SampleSet::load(path)?.pairs()?,
        None => {
            let generated = generate_pairs(cfg)?;
            SampleSet::from_pairs(cfg.task.dim, cfg.seed, &generated)
                .save(&dir.path(files::PAIRS))?;
            generated
        }
    };
    if train.is_empty() {
        return Err(Error::usage("the pair dataset is empty"));
    }
    let heldout = generate_heldout_pairs(cfg)?;
    SampleSet::from_pairs(cfg.task.dim, cfg.seed, &heldout)
        .save(&dir.path(files::HELDOUT_PAIRS))?;

    let offset = if time_conditioning { 0 } else { 2 };
    let mut scorer = Scorer::new(
        cfg.scorer_spec(time_conditioning),
        &mut cfg.stream(Stage::Scorer, offset),
    )?;
    if cfg.scorer.pseudo_clean {
        let d = denoiser.ok_or_else(|| {
            Error::usage("the scorer scores clean estimates and needs a pretrained denoiser")
        })?;
        scorer.set_preprocessor(d.clone())?;
    }
    let losses = train_scorer(
        &mut scorer,
        &train,
        &schedule,
        &cfg.scorer.train,
        &mut cfg.stream(Stage::Scorer, offset + 1),
    )?;
    scorer.freeze();
    let tag = files::scorer_tag(time_conditioning);
    scorer.save(&dir.path(&format!("{tag}.toml")))?;

    let accuracy = (1..=steps)
        .map(|t| {
            pairwise_accuracy(
                &scorer,
                &heldout,
                &schedule,
                t,
                &mut cfg.stream(Stage::Scorer, 100 + t as u64),
            )
        })
        .collect::<Result<Vec<_>>>()?;
    let mut outcome = ScorerOutcome {
        scorer,
        losses,
        accuracy,
        early_accuracy: 0.0,
        pooled_accuracy: 0.0,
        below_floor: false,
    };
    let (lo, hi) = cfg.align.pooled_range(steps);
    outcome.early_accuracy = outcome.mean_accuracy(1, (steps / 2).max(1));
    outcome.pooled_accuracy = outcome.mean_accuracy(lo, hi);
    outcome.below_floor = outcome.pooled_accuracy < cfg.scorer.accuracy_floor;

    write_csv(
        &dir.path(&format!("{tag}_loss.csv")),
        &["epoch", "loss"],
        loss_rows(&outcome.losses),
    )?;
    let bins = (1..=steps).step_by(ACCURACY_BIN).map(|lo| {
        let hi = (lo + ACCURACY_BIN - 1).min(steps);
        vec![
            lo.to_string(),
            hi.to_string(),
            outcome.mean_accuracy(lo, hi).to_string(),
        ]
    });
    write_csv(
        &dir.path(&format!("{tag}_accuracy.csv")),
        &["t_lo", "t_hi", "accuracy"],
        bins,
    )?;
    write_csv(
        &dir.path(&format!("{tag}_summary.csv")),
        &[
            "time_conditioning",
            "early_accuracy",
            "pooled_accuracy",
            "accuracy_floor",
            "below_floor",
        ],
        [vec![
            time_conditioning.to_string(),
            outcome.early_accuracy.to_string(),
            outcome.pooled_accuracy.to_string(),
            cfg.scorer.accuracy_floor.to_string(),
            outcome.below_floor.to_string(),
        ]],
    )?;
    Ok(outcome)
}

#[derive(Debug, Clone)]
pub struct AlignRun {
    pub policy: DiffusionPolicy,
    pub outcome: AlignOutcome,
}

/// Aligns a copy of `denoiser` against `scorer` and writes the aligned
/// checkpoint with its metric, batch, pooled-step and timing logs.
pub fn cmd_align(
    cfg: &RunConfig,
    dir: &RunDir,
    denoiser: &DiffusionPolicy,
    scorer: &Scorer,
) -> Result<AlignRun> {
    let task = SyntheticTask::new(cfg.task.clone())?;
    let mut policy = denoiser.clone();
    let outcome = align(
        &mut policy,
        scorer,
        &task,
        &cfg.align,
        cfg.stage_seed(Stage::Align),
    )?;
    policy.save(&dir.path(files::ALIGNED), "aligned", checkpoint_meta(dir))?;
    write_metrics_csv(
        &dir.path(files::ALIGN_METRICS),
        &outcome.epochs,
        task.classes(),
    )?;
    write_batches_csv(&dir.path(files::ALIGN_BATCHES), &outcome.batches)?;
    write_pooled_csv(&dir.path(files::ALIGN_POOLED), &outcome.pooled)?;
    write_timings_csv(&dir.path(files::ALIGN_TIMINGS), &outcome.epoch_seconds)?;
    Ok(AlignRun { policy, outcome })
}

/// Compares `policy` with `reference` on seed-paired samples, writes the
/// report and dumps the first evaluation trajectory of every class.
pub fn cmd_eval(
    cfg: &RunConfig,
    dir: &RunDir,
    policy: &DiffusionPolicy,
    reference: &DiffusionPolicy,
    scorer: &Scorer,
) -> Result<EvalReport> {
    let task = SyntheticTask::new(cfg.task.clone())?;
    let seed = cfg.stage_seed(Stage::Eval);
    let n = cfg.eval.n_per_class;
    let report = evaluate(policy, reference, scorer, &task, n, seed, dir.digest())?;
    report.write_csv(&dir.path(files::EVAL))?;
    for c in 0..task.classes() {
        let s = derive_seed(seed, "eval", (c * n) as u64);
        sample_trajectory(policy, c, task.dim(), s)?
            .dump()
            .save(&dir.path(&files::dump(c)))?;
    }
    Ok(report)
}

/// Re-runs a dumped trajectory. A mismatch is a precondition violation.
pub fn cmd_replay(policy: &DiffusionPolicy, dump: &Path) -> Result<ReplayReport> {
    let dump_data = TrajectoryDump::load(dump)?;
    let report = replay(policy, policy.dim(), &dump_data)?;
    if let Some(t) = report.first_mismatch {
        return Err(Error::usage(format!(
            "trajectory {} diverges from its dump at t = {t}",
            dump.display()
        )));
    }
    Ok(report)
}

fn load_or_pretrain(cfg: &RunConfig, dir: &RunDir) -> Result<DiffusionPolicy> {
    let path = dir.path(files::DENOISER);
    if path.exists() {
        load_denoiser(&path)
    } else {
        Ok(cmd_pretrain(cfg, dir)?.policy)
    }
}

fn load_or_train_scorer(
    cfg: &RunConfig,
    dir: &RunDir,
    denoiser: &DiffusionPolicy,
    time_conditioning: bool,
) -> Result<Scorer> {
    let path = dir.path(&format!("{}.toml", files::scorer_tag(time_conditioning)));
    if path.exists() {
        load_scorer(&path, denoiser)
    } else {
        Ok(cmd_train_scorer(cfg, dir, Some(denoiser), None, time_conditioning)?.scorer)
    }
}

/// Pretrained policy and frozen scorers for `cfg.seed`, reusing artifacts
/// already present in `dir` and producing the missing ones.
pub fn seed_context(cfg: &RunConfig, dir: &RunDir, time_blind: bool) -> Result<SeedContext> {
    let pretrained = load_or_pretrain(cfg, dir)?;
    let scorer = load_or_train_scorer(cfg, dir, &pretrained, true)?;
    let time_blind_scorer = if time_blind {
        Some(load_or_train_scorer(cfg, dir, &pretrained, false)?)
    } else {
        None
    };
    Ok(SeedContext {
        seed: cfg.seed,
        align_seed: cfg.stage_seed(Stage::Align),
        eval_seed: cfg.stage_seed(Stage::Eval),
        pretrained,
        scorer,
        time_blind_scorer,
    })
}

/// Directory of the per-seed artifacts of an ablation run.
pub fn seed_dir(dir: &RunDir, seed: u64) -> PathBuf {
    dir.path(&format!("seed-{seed}"))
}

/// Runs one ablation axis over every configured seed and writes the cell
/// table and its across-seed summary.
pub fn cmd_ablate(
    cfg: &RunConfig,
    dir: &RunDir,
    axis: AblationAxis,
    values: Option<Vec<String>>,
) -> Result<Vec<AblationCell>> {
    let task = SyntheticTask::new(cfg.task.clone())?;
    let values = values.unwrap_or_else(|| axis.default_values(cfg.schedule.steps));
    for v in &values {
        axis.variant(v, &cfg.align)?
            .config
            .validate(cfg.schedule.steps)?;
    }
    let time_blind = axis == AblationAxis::TimeConditioning;
    let contexts = cfg
        .ablation
        .seeds
        .iter()
        .map(|&seed| {
            let seed_cfg = cfg.with_seed(seed);
            let sub = RunDir::open_at(&seed_dir(dir, seed), &seed_cfg)?;
            seed_context(&seed_cfg, &sub, time_blind)
        })
        .collect::<Result<Vec<_>>>()?;
    let cells = run_ablation(
        axis,
        &values,
        &cfg.align,
        &contexts,
        &task,
        cfg.ablation.eval_per_class,
        dir.digest(),
    )?;
    write_ablation_csv(&dir.path(&files::ablation(axis.name())), &cells)?;
    write_summary_csv(&dir.path(&files::ablation_summary(axis.name())), &cells)?;
    Ok(cells)
}

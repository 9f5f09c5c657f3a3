use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use easpo_core::baselines::AblationAxis;
use easpo_core::config::RunConfig;
use easpo_core::easpo::AlignMode;
use easpo_core::pipeline::{
    cmd_ablate, cmd_align, cmd_eval, cmd_pretrain, cmd_replay, cmd_train_scorer, files,
    load_denoiser, load_scorer, RunDir,
};
use easpo_core::{Error, Result};

#[derive(Parser, Debug)]
#[command(
    name = "easpo",
    version,
    about = "Stepwise preference alignment of a toy diffusion policy"
)]
struct Cli {
    #[command(flatten)]
    common: Common,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug)]
struct Common {
    /// Run config (TOML). Omitted keys take their defaults.
    #[arg(long, global = true, value_name = "PATH")]
    config: Option<PathBuf>,
    /// Root seed, overriding the config.
    #[arg(long, global = true, value_name = "N")]
    seed: Option<u64>,
    /// Run directory, overriding the config.
    #[arg(long, global = true, value_name = "DIR")]
    out: Option<PathBuf>,
    /// Pooling mode, overriding the config.
    #[arg(long, global = true, value_enum)]
    mode: Option<ModeArg>,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum ModeArg {
    SingleTau,
    PerStep,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Train the base denoiser.
    Pretrain,
    /// Train and freeze the stepwise scorer.
    TrainScorer {
        /// Denoiser used for clean-estimate preprocessing [default: <out>/denoiser.toml].
        #[arg(long)]
        denoiser: Option<PathBuf>,
        /// Pair dataset [default: generated from the config].
        #[arg(long)]
        pairs: Option<PathBuf>,
        /// Train the time-blind variant.
        #[arg(long)]
        time_blind: bool,
    },
    /// Align the denoiser against the frozen scorer.
    Align {
        /// [default: <out>/denoiser.toml]
        #[arg(long)]
        denoiser: Option<PathBuf>,
        /// [default: <out>/scorer.toml]
        #[arg(long)]
        scorer: Option<PathBuf>,
    },
    /// Compare a checkpoint against a reference checkpoint.
    Eval {
        /// [default: <out>/aligned.toml]
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// [default: <out>/denoiser.toml]
        #[arg(long)]
        reference: Option<PathBuf>,
        /// [default: <out>/scorer.toml]
        #[arg(long)]
        scorer: Option<PathBuf>,
    },
    /// Sweep one ablation axis over every configured seed.
    Ablate {
        /// time-conditioning, next-state, k, timestep-range, method or win-lose.
        #[arg(long)]
        axis: String,
        /// Comma-separated values [default: the axis's standard sweep].
        #[arg(long, value_delimiter = ',')]
        values: Option<Vec<String>>,
    },
    /// Re-run a dumped trajectory and check it step by step.
    Replay {
        #[arg(long)]
        dump: PathBuf,
        /// [default: <out>/aligned.toml]
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// Print the resolved config.
    ShowConfig,
}

fn resolve_config(common: &Common) -> Result<RunConfig> {
    let mut cfg = match &common.config {
        Some(path) => RunConfig::load(path)?,
        None => RunConfig::default(),
    };
    if let Some(seed) = common.seed {
        cfg.seed = seed;
    }
    if let Some(out) = &common.out {
        cfg.out_dir = out.clone();
    }
    if let Some(mode) = common.mode {
        cfg.align.mode = match mode {
            ModeArg::SingleTau => AlignMode::SingleTau,
            ModeArg::PerStep => AlignMode::PerStep,
        };
    }
    cfg.validate()?;
    Ok(cfg)
}

fn or_default(path: &Option<PathBuf>, dir: &RunDir, name: &str) -> PathBuf {
    path.clone().unwrap_or_else(|| dir.path(name))
}

fn show(path: &Path) -> String {
    path.display().to_string()
}

fn run(cli: Cli) -> Result<()> {
    let cfg = resolve_config(&cli.common)?;
    if let Command::ShowConfig = cli.command {
        print!("{}", cfg.to_toml()?);
        println!("# digest {}", cfg.digest()?);
        return Ok(());
    }
    let dir = RunDir::open(&cfg)?;
    println!("run {} (config digest {})", show(dir.root()), dir.digest());
    match &cli.command {
        Command::Pretrain => {
            let out = cmd_pretrain(&cfg, &dir)?;
            let last = out.losses.last().copied().unwrap_or(f64::NAN);
            println!(
                "pretrained {} epochs, final loss {last:.5}",
                out.losses.len()
            );
            for (c, (m, n)) in out.oracle_means.iter().zip(&out.noise_means).enumerate() {
                println!("class {c}: oracle mean {m:.4} (noise baseline {n:.4})");
            }
        }
        Command::TrainScorer {
            denoiser,
            pairs,
            time_blind,
        } => {
            let denoiser = if cfg.scorer.pseudo_clean {
                Some(load_denoiser(&or_default(denoiser, &dir, files::DENOISER))?)
            } else {
                None
            };
            let out =
                cmd_train_scorer(&cfg, &dir, denoiser.as_ref(), pairs.as_deref(), !time_blind)?;
            println!(
                "held-out accuracy: {:.4} for t <= T/2, {:.4} over the pooled range",
                out.early_accuracy, out.pooled_accuracy
            );
            if out.below_floor {
                eprintln!(
                    "warning: pooled-range accuracy {:.4} is below the floor {:.4}",
                    out.pooled_accuracy, cfg.scorer.accuracy_floor
                );
            }
        }
        Command::Align { denoiser, scorer } => {
            let denoiser = load_denoiser(&or_default(denoiser, &dir, files::DENOISER))?;
            let scorer = load_scorer(&or_default(scorer, &dir, files::SCORER), &denoiser)?;
            let out = cmd_align(&cfg, &dir, &denoiser, &scorer)?;
            for m in &out.outcome.epochs {
                println!(
                    "epoch {}: step loss {:.5}, reward gap {:.4}, |log-ratio gap| {:.4}, oracle {:.4}",
                    m.epoch,
                    m.mean_step_loss,
                    m.mean_reward_gap,
                    m.mean_abs_logratio,
                    m.oracle_mean()
                );
            }
        }
        Command::Eval {
            checkpoint,
            reference,
            scorer,
        } => {
            let policy = load_denoiser(&or_default(checkpoint, &dir, files::ALIGNED))?;
            let reference = load_denoiser(&or_default(reference, &dir, files::DENOISER))?;
            let scorer = load_scorer(&or_default(scorer, &dir, files::SCORER), &reference)?;
            let report = cmd_eval(&cfg, &dir, &policy, &reference, &scorer)?;
            for (c, g) in report.gain_per_class().iter().enumerate() {
                println!(
                    "class {c}: oracle gain {g:+.5}, win rate {:.4}",
                    report.win_rate_per_class[c]
                );
            }
            println!(
                "all: oracle {:.4} vs reference {:.4}, win rate {:.4}",
                report.oracle_mean(),
                report.reference_oracle_mean(),
                report.win_rate()
            );
        }
        Command::Ablate { axis, values } => {
            let axis = AblationAxis::parse(axis)?;
            let cells = cmd_ablate(&cfg, &dir, axis, values.clone())?;
            for c in &cells {
                println!(
                    "seed {} {}={}: oracle gain {:+.5}, win rate {:.4}",
                    c.seed,
                    c.axis,
                    c.value,
                    c.report.oracle_gain(),
                    c.report.win_rate()
                );
            }
        }
        Command::Replay { dump, checkpoint } => {
            let policy = load_denoiser(&or_default(checkpoint, &dir, files::ALIGNED))?;
            let report = cmd_replay(&policy, dump)?;
            println!(
                "replayed {} steps of class {}: identical",
                report.trajectory.noises.len(),
                report.trajectory.class
            );
        }
        Command::ShowConfig => unreachable!(),
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}

fn exit_code(e: &Error) -> u8 {
    e.exit_code() as u8
}

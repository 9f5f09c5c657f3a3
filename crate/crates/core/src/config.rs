//! Run configuration: every knob of the pipeline in one TOML document.
//!
//! Unknown keys are rejected. Omitted sections and keys take the defaults
//! below. The digest hashes the canonical serialization with the output
//! directory blanked, so moving a run does not change its identity.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::diffusion::{DenoiserSpec, ScheduleConfig};
use crate::easpm::{ScorerSpec, ScorerTrainConfig};
use crate::easpo::AlignConfig;
use crate::error::{Error, Result};
use crate::pretrain::PretrainConfig;
use crate::rng::{derive_seed, stream, StreamRng};
use crate::task::TaskConfig;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ScorerSettings {
    pub hidden: Vec<usize>,
    pub embed_dim: usize,
    pub time_conditioning: bool,
    pub temperature: f64,
    /// Score the one-shot clean estimate of a noisy state instead of the
    /// raw state. Needs the pretrained denoiser at training and load time.
    pub pseudo_clean: bool,
    pub train_pairs: usize,
    pub heldout_pairs: usize,
    /// Minimum mean held-out accuracy over the pooled range; below it the
    /// scorer stage finishes with a warning flag.
    pub accuracy_floor: f64,
    pub train: ScorerTrainConfig,
}

impl Default for ScorerSettings {
    fn default() -> Self {
        Self {
            hidden: vec![128, 128],
            embed_dim: 16,
            time_conditioning: true,
            temperature: 10.0,
            pseudo_clean: true,
            train_pairs: 2048,
            heldout_pairs: 500,
            accuracy_floor: 0.8,
            train: ScorerTrainConfig::for_steps(ScheduleConfig::default().steps),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalSettings {
    pub n_per_class: usize,
}

impl Default for EvalSettings {
    fn default() -> Self {
        Self { n_per_class: 500 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AblationSettings {
    /// Root seeds; each gets its own pretrained policy and scorers.
    pub seeds: Vec<u64>,
    pub eval_per_class: usize,
}

impl Default for AblationSettings {
    fn default() -> Self {
        Self {
            seeds: vec![1, 2, 3],
            eval_per_class: 500,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    /// Root seed of every random stream in the run.
    pub seed: u64,
    pub out_dir: PathBuf,
    pub task: TaskConfig,
    pub schedule: ScheduleConfig,
    pub pretrain: PretrainConfig,
    pub scorer: ScorerSettings,
    pub align: AlignConfig,
    pub eval: EvalSettings,
    pub ablation: AblationSettings,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 1,
            out_dir: PathBuf::from("runs/default"),
            task: TaskConfig::default(),
            schedule: ScheduleConfig::default(),
            pretrain: PretrainConfig::default(),
            scorer: ScorerSettings::default(),
            align: AlignConfig::default(),
            eval: EvalSettings::default(),
            ablation: AblationSettings::default(),
        }
    }
}

/// Pipeline stages that draw randomness.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Stage {
    Task,
    Pretrain,
    Scorer,
    Align,
    Eval,
}

impl Stage {
    pub fn label(self) -> &'static str {
        match self {
            Stage::Task => "task",
            Stage::Pretrain => "pretrain",
            Stage::Scorer => "scorer",
            Stage::Align => "align",
            Stage::Eval => "eval",
        }
    }
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| Error::config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml(&text)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::config(e.to_string()))
    }

    /// Hex SHA-256 of the canonical serialization, ignoring `out_dir`.
    pub fn digest(&self) -> Result<String> {
        let mut canonical = self.clone();
        canonical.out_dir = PathBuf::new();
        let text = canonical.to_toml()?;
        Ok(hex::encode(Sha256::digest(text.as_bytes())))
    }

    pub fn validate(&self) -> Result<()> {
        let steps = self.schedule.steps;
        self.schedule.build()?;
        crate::task::SyntheticTask::new(self.task.clone())?;
        self.align.validate(steps)?;
        self.scorer.train.validate(steps)?;
        if self.pretrain.hidden.is_empty() || self.pretrain.hidden.contains(&0) {
            return Err(Error::config(
                "pretrain.hidden needs at least one positive width",
            ));
        }
        if self.pretrain.batch_size == 0 || self.pretrain.train_samples == 0 {
            return Err(Error::config(
                "pretraining needs samples and a positive batch size",
            ));
        }
        if self.scorer.train_pairs == 0 || self.scorer.heldout_pairs == 0 {
            return Err(Error::config("scorer pair counts must be positive"));
        }
        if !(0.0..=1.0).contains(&self.scorer.accuracy_floor) {
            return Err(Error::config("scorer.accuracy_floor must lie in [0, 1]"));
        }
        if self.ablation.seeds.is_empty() {
            return Err(Error::config("ablation.seeds must not be empty"));
        }
        Ok(())
    }

    pub fn denoiser_spec(&self) -> DenoiserSpec {
        DenoiserSpec {
            dim: self.task.dim,
            classes: self.task.classes,
            hidden: self.pretrain.hidden.clone(),
        }
    }

    /// Scorer architecture; `time_conditioning` overrides the configured
    /// flag so the time-blind ablation scorer shares everything else.
    pub fn scorer_spec(&self, time_conditioning: bool) -> ScorerSpec {
        ScorerSpec {
            dim: self.task.dim,
            classes: self.task.classes,
            steps: self.schedule.steps,
            hidden: self.scorer.hidden.clone(),
            embed_dim: self.scorer.embed_dim,
            time_conditioning,
            temperature: self.scorer.temperature,
            pseudo_clean: self.scorer.pseudo_clean,
        }
    }

    /// Independent stream `index` of `stage` under the root seed.
    pub fn stream(&self, stage: Stage, index: u64) -> StreamRng {
        stream(self.seed, stage.label(), index)
    }

    pub fn stage_seed(&self, stage: Stage) -> u64 {
        derive_seed(self.seed, stage.label(), 0)
    }

    /// The same configuration under another root seed.
    pub fn with_seed(&self, seed: u64) -> Self {
        Self {
            seed,
            ..self.clone()
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip_keeps_value_and_digest() {
        let mut cfg = RunConfig::default();
        cfg.align.lr = 3.3e-5;
        cfg.scorer.temperature = 7.25;
        let text = cfg.to_toml().unwrap();
        let back = RunConfig::from_toml(&text).unwrap();
        assert_eq!(back, cfg);
        assert_eq!(back.digest().unwrap(), cfg.digest().unwrap());
        assert_eq!(back.to_toml().unwrap(), text);
    }

    #[test]
    fn digest_ignores_output_directory_only() {
        let a = RunConfig::default();
        let mut b = a.clone();
        b.out_dir = PathBuf::from("elsewhere");
        assert_eq!(a.digest().unwrap(), b.digest().unwrap());
        assert_ne!(a.digest().unwrap(), a.with_seed(9).digest().unwrap());
    }

    #[test]
    fn unknown_keys_are_rejected() {
        assert!(matches!(
            RunConfig::from_toml("sed = 3\n"),
            Err(Error::Config(_))
        ));
        assert!(matches!(
            RunConfig::from_toml("[align]\nkapa = 3\n"),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn partial_files_fill_in_defaults() {
        let cfg = RunConfig::from_toml("seed = 4\n[align]\nk = 8\n").unwrap();
        assert_eq!(cfg.seed, 4);
        assert_eq!(cfg.align.k, 8);
        assert_eq!(cfg.align.kappa, 12);
        assert_eq!(cfg.pretrain, PretrainConfig::default());
    }

    #[test]
    fn invalid_values_are_config_errors() {
        assert!(matches!(
            RunConfig::from_toml("[align]\nk = 1\n"),
            Err(Error::Config(_))
        ));
        assert!(matches!(
            RunConfig::from_toml("[schedule]\nsteps = 0\n"),
            Err(Error::Config(_))
        ));
    }
}

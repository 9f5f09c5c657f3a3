use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::diffusion::{
    log_ratio_from_means, perturb_mean, reverse_mean, LatentState, NoisePredictor,
};
use crate::easpm::StepScorer;
use crate::error::{Error, Result};
use crate::numerics::vector::mean;
use crate::rng::{derive_seed, standard_normal_vec};
use crate::task::SyntheticTask;

/// Smallest per-class sample count accepted by [`evaluate`].
pub const MIN_EVAL_SAMPLES: usize = 500;

/// Comparison of a policy against a reference on seed-paired samples.
#[derive(Debug, Clone, PartialEq)]
pub struct EvalReport {
    pub n_per_class: usize,
    pub seed: u64,
    pub config_digest: String,
    pub oracle_mean_per_class: Vec<f64>,
    pub reference_oracle_mean_per_class: Vec<f64>,
    /// Per-class fraction of paired prompts where the policy's sample
    /// scores higher under the oracle; ties count one half.
    pub win_rate_per_class: Vec<f64>,
    /// Frozen-scorer score of the policy's samples at `t = 0`.
    pub scorer_mean: f64,
    /// Mean over the policy's samples of the path log-likelihood ratio
    /// against the reference.
    pub logratio_drift: f64,
}

impl EvalReport {
    pub fn oracle_mean(&self) -> f64 {
        mean(&self.oracle_mean_per_class)
    }

    pub fn reference_oracle_mean(&self) -> f64 {
        mean(&self.reference_oracle_mean_per_class)
    }

    pub fn oracle_gain(&self) -> f64 {
        self.oracle_mean() - self.reference_oracle_mean()
    }

    pub fn gain_per_class(&self) -> Vec<f64> {
        self.oracle_mean_per_class
            .iter()
            .zip(&self.reference_oracle_mean_per_class)
            .map(|(a, b)| a - b)
            .collect()
    }

    /// Classes are equally sized, so the overall win rate is the mean of
    /// the per-class rates.
    pub fn win_rate(&self) -> f64 {
        mean(&self.win_rate_per_class)
    }

    /// One row per class plus an `all` row.
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let csv_err = |e: csv::Error| Error::io(path, e.into());
        let mut w = csv::Writer::from_path(path).map_err(csv_err)?;
        w.write_record([
            "class",
            "n",
            "oracle_mean",
            "reference_oracle_mean",
            "oracle_gain",
            "win_rate",
            "scorer_mean",
            "logratio_drift",
            "seed",
            "config_digest",
        ])
        .map_err(csv_err)?;
        let seed = format!("{:016x}", self.seed);
        for c in 0..self.oracle_mean_per_class.len() {
            w.write_record([
                c.to_string(),
                self.n_per_class.to_string(),
                self.oracle_mean_per_class[c].to_string(),
                self.reference_oracle_mean_per_class[c].to_string(),
                (self.oracle_mean_per_class[c] - self.reference_oracle_mean_per_class[c])
                    .to_string(),
                self.win_rate_per_class[c].to_string(),
                String::new(),
                String::new(),
                seed.clone(),
                self.config_digest.clone(),
            ])
            .map_err(csv_err)?;
        }
        w.write_record([
            "all".to_string(),
            (self.n_per_class * self.oracle_mean_per_class.len()).to_string(),
            self.oracle_mean().to_string(),
            self.reference_oracle_mean().to_string(),
            self.oracle_gain().to_string(),
            self.win_rate().to_string(),
            self.scorer_mean.to_string(),
            self.logratio_drift.to_string(),
            seed,
            self.config_digest.clone(),
        ])
        .map_err(csv_err)?;
        w.flush().map_err(|e| Error::io(path, e))
    }
}

/// Ancestral sample drawn exactly as `sample_trajectory` draws it, also
/// accumulating the path log ratio against `reference`.
pub(crate) fn sample_with_drift(
    policy: &impl NoisePredictor,
    reference: &impl NoisePredictor,
    class: usize,
    dim: usize,
    seed: u64,
) -> Result<(Vec<f64>, f64)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let steps = policy.schedule().steps();
    let mut x = standard_normal_vec(&mut rng, dim);
    let mut drift = 0.0;
    for t in (1..=steps).rev() {
        let state = LatentState::new(x, t, class);
        let mu = reverse_mean(policy, &state)?;
        let var = policy.schedule().posterior_var(t);
        let z = standard_normal_vec(&mut rng, dim);
        let next = perturb_mean(&mu, var, &z);
        if var > 0.0 {
            let mu_ref = reverse_mean(reference, &state)?;
            drift += log_ratio_from_means(&next, &mu, &mu_ref, var)?;
        }
        x = next;
    }
    Ok((x, drift))
}

fn final_sample(
    model: &impl NoisePredictor,
    class: usize,
    dim: usize,
    seed: u64,
) -> Result<Vec<f64>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut x = standard_normal_vec(&mut rng, dim);
    for t in (1..=model.schedule().steps()).rev() {
        let mu = reverse_mean(model, &LatentState::new(x, t, class))?;
        let z = standard_normal_vec(&mut rng, dim);
        x = perturb_mean(&mu, model.schedule().posterior_var(t), &z);
    }
    Ok(x)
}

/// Generates `n_per_class` seed-paired samples per class from `policy` and
/// `reference` and compares them.
pub fn evaluate(
    policy: &impl NoisePredictor,
    reference: &impl NoisePredictor,
    scorer: &impl StepScorer,
    task: &SyntheticTask,
    n_per_class: usize,
    seed: u64,
    config_digest: &str,
) -> Result<EvalReport> {
    if n_per_class < MIN_EVAL_SAMPLES {
        return Err(Error::config(format!(
            "evaluation needs at least {MIN_EVAL_SAMPLES} samples per class, got {n_per_class}"
        )));
    }
    let dim = task.dim();
    let classes = task.classes();
    let mut oracle = Vec::with_capacity(classes);
    let mut oracle_ref = Vec::with_capacity(classes);
    let mut win_rate = Vec::with_capacity(classes);
    let mut scorer_sum = 0.0;
    let mut drift_sum = 0.0;
    for c in 0..classes {
        let (mut a, mut b, mut wins) = (0.0, 0.0, 0.0);
        for i in 0..n_per_class {
            let s = derive_seed(seed, "eval", (c * n_per_class + i) as u64);
            let (x, drift) = sample_with_drift(policy, reference, c, dim, s)?;
            let x_ref = final_sample(reference, c, dim, s)?;
            let oa = task.oracle_score(&x, c)?;
            let ob = task.oracle_score(&x_ref, c)?;
            a += oa;
            b += ob;
            wins += if oa > ob {
                1.0
            } else if oa == ob {
                0.5
            } else {
                0.0
            };
            scorer_sum += scorer.step_score(&x, 0, c)?;
            drift_sum += drift;
        }
        let n = n_per_class as f64;
        oracle.push(a / n);
        oracle_ref.push(b / n);
        win_rate.push(wins / n);
    }
    let total = (classes * n_per_class) as f64;
    Ok(EvalReport {
        n_per_class,
        seed,
        config_digest: config_digest.to_string(),
        oracle_mean_per_class: oracle,
        reference_oracle_mean_per_class: oracle_ref,
        win_rate_per_class: win_rate,
        scorer_mean: scorer_sum / total,
        logratio_drift: drift_sum / total,
    })
}

/// Permutation p-value for class dependence of generated samples.
///
/// The statistic is the mean oracle score of each sample against the class
/// it was generated for; the null distribution shuffles the class labels.
/// A policy that ignores its prompt gives a large p-value.
pub fn class_permutation_test<R: Rng + ?Sized>(
    task: &SyntheticTask,
    samples: &[(Vec<f64>, usize)],
    permutations: usize,
    rng: &mut R,
) -> Result<f64> {
    if samples.is_empty() || permutations == 0 {
        return Err(Error::usage(
            "permutation test needs samples and permutations",
        ));
    }
    let classes = task.classes();
    let mut table = Vec::with_capacity(samples.len() * classes);
    for (x, _) in samples {
        for c in 0..classes {
            table.push(task.oracle_score(x, c)?);
        }
    }
    let stat = |labels: &[usize]| -> f64 {
        labels
            .iter()
            .enumerate()
            .map(|(i, &c)| table[i * classes + c])
            .sum::<f64>()
    };
    let mut labels: Vec<usize> = samples.iter().map(|(_, c)| *c).collect();
    let observed = stat(&labels);
    let mut extreme = 0usize;
    for _ in 0..permutations {
        labels.shuffle(rng);
        if stat(&labels) >= observed {
            extreme += 1;
        }
    }
    Ok((1 + extreme) as f64 / (1 + permutations) as f64)
}

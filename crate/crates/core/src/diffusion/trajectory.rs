use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::policy::{reverse_sample, LatentState, NoisePredictor};
use crate::error::{Error, Result};
use crate::rng::{standard_normal_vec, vector_digest};

/// A full ancestral rollout from `t = T` down to `t = 0`.
///
/// `noises[i]` is the standard-normal draw that produced `states[i + 1]`
/// from `states[i]`, so the whole path is replayable from `seed`.
#[derive(Debug, Clone, PartialEq)]
pub struct Trajectory {
    pub class: usize,
    pub seed: u64,
    pub states: Vec<LatentState>,
    pub noises: Vec<Vec<f64>>,
}

impl Trajectory {
    pub fn final_sample(&self) -> &[f64] {
        &self.states.last().expect("trajectory is never empty").x
    }

    pub fn dump(&self) -> TrajectoryDump {
        TrajectoryDump {
            class: self.class,
            seed: format!("{:016x}", self.seed),
            steps: self.states[0].t,
            initial_digest: vector_digest(&self.states[0].x),
            records: self
                .noises
                .iter()
                .zip(self.states.windows(2))
                .map(|(z, pair)| StepRecord {
                    t: pair[0].t,
                    z_digest: vector_digest(z),
                    x_digest: vector_digest(&pair[1].x),
                })
                .collect(),
        }
    }
}

/// Plain ancestral sampling from `x_T ~ N(0, I)` driven by one seeded stream.
pub fn sample_trajectory(
    model: &impl NoisePredictor,
    class: usize,
    dim: usize,
    seed: u64,
) -> Result<Trajectory> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let steps = model.schedule().steps();
    let mut states = Vec::with_capacity(steps + 1);
    let mut noises = Vec::with_capacity(steps);
    states.push(LatentState::new(
        standard_normal_vec(&mut rng, dim),
        steps,
        class,
    ));
    for _ in 0..steps {
        let (next, z) = reverse_sample(model, states.last().unwrap(), &mut rng)?;
        states.push(next);
        noises.push(z);
    }
    Ok(Trajectory {
        class,
        seed,
        states,
        noises,
    })
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StepRecord {
    /// Timestep of the parent state.
    pub t: usize,
    pub z_digest: String,
    /// Digest of the resulting state at `t - 1`.
    pub x_digest: String,
}

/// Text record of a trajectory for replay debugging.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrajectoryDump {
    pub class: usize,
    /// Hex-encoded 64-bit seed.
    pub seed: String,
    pub steps: usize,
    pub initial_digest: String,
    pub records: Vec<StepRecord>,
}

impl TrajectoryDump {
    pub fn seed_value(&self) -> Result<u64> {
        u64::from_str_radix(&self.seed, 16)
            .map_err(|e| Error::config(format!("bad trajectory seed `{}`: {e}", self.seed)))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let text = toml::to_string(self).map_err(|e| Error::format(path, e.to_string()))?;
        std::fs::write(path, text).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        toml::from_str(&text).map_err(|e| Error::format(path, e.to_string()))
    }
}

#[derive(Debug, Clone)]
pub struct ReplayReport {
    pub trajectory: Trajectory,
    /// Timestep of the first record whose digests differ, if any.
    pub first_mismatch: Option<usize>,
}

impl ReplayReport {
    pub fn matched(&self) -> bool {
        self.first_mismatch.is_none()
    }
}

/// Re-runs a dumped trajectory under `model` and compares every digest.
pub fn replay(
    model: &impl NoisePredictor,
    dim: usize,
    dump: &TrajectoryDump,
) -> Result<ReplayReport> {
    if dump.steps != model.schedule().steps() {
        return Err(Error::config(format!(
            "dump has {} steps but the model schedule has {}",
            dump.steps,
            model.schedule().steps()
        )));
    }
    let trajectory = sample_trajectory(model, dump.class, dim, dump.seed_value()?)?;
    let fresh = trajectory.dump();
    let first_mismatch = if fresh.initial_digest != dump.initial_digest {
        Some(dump.steps)
    } else {
        fresh
            .records
            .iter()
            .zip(&dump.records)
            .find(|(a, b)| a != b)
            .map(|(_, b)| b.t)
            .or_else(|| (fresh.records.len() != dump.records.len()).then_some(0))
    };
    Ok(ReplayReport {
        trajectory,
        first_mismatch,
    })
}

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// How the supervised pair is picked from a scored pool.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum PairSelection {
    /// Highest and lowest scored candidates.
    #[default]
    BestWorst,
    /// Two distinct candidates drawn uniformly, ordered by score.
    RandomPair,
}

/// Win/lose pair chosen from one candidate pool.
#[derive(Debug, Clone, PartialEq)]
pub struct StepPreference {
    pub win_index: usize,
    pub lose_index: usize,
    pub win: Vec<f64>,
    pub lose: Vec<f64>,
    pub s_w: f64,
    pub s_l: f64,
    pub t: usize,
    pub prompt: usize,
}

impl StepPreference {
    /// Reward gap `s_w - s_l`.
    pub fn reward_gap(&self) -> f64 {
        self.s_w - self.s_l
    }
}

/// Indices of the arg-max and the arg-min over the remaining candidates,
/// ties going to the lowest index.
pub fn best_worst(scores: &[f64]) -> Result<(usize, usize)> {
    if scores.len() < 2 {
        return Err(Error::usage(format!(
            "need at least two candidates, got {}",
            scores.len()
        )));
    }
    let mut win = 0;
    for (i, &s) in scores.iter().enumerate() {
        if s > scores[win] {
            win = i;
        }
    }
    let mut lose = usize::MAX;
    for (i, &s) in scores.iter().enumerate() {
        if i != win && (lose == usize::MAX || s < scores[lose]) {
            lose = i;
        }
    }
    Ok((win, lose))
}

pub fn select_indices<R: Rng + ?Sized>(
    scores: &[f64],
    strategy: PairSelection,
    rng: &mut R,
) -> Result<(usize, usize)> {
    match strategy {
        PairSelection::BestWorst => best_worst(scores),
        PairSelection::RandomPair => {
            if scores.len() < 2 {
                return Err(Error::usage("need at least two candidates"));
            }
            let a = rng.random_range(0..scores.len());
            let b = (a + rng.random_range(1..scores.len())) % scores.len();
            let (lo, hi) = (a.min(b), a.max(b));
            Ok(if scores[hi] > scores[lo] {
                (hi, lo)
            } else {
                (lo, hi)
            })
        }
    }
}

pub(crate) fn build_preference(
    candidates: &[Vec<f64>],
    scores: &[f64],
    (win_index, lose_index): (usize, usize),
    t: usize,
    prompt: usize,
) -> StepPreference {
    StepPreference {
        win_index,
        lose_index,
        win: candidates[win_index].clone(),
        lose: candidates[lose_index].clone(),
        s_w: scores[win_index],
        s_l: scores[lose_index],
        t,
        prompt,
    }
}

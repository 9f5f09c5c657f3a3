//! Time-conditioned stepwise preference scorer: scoring noisy states
//! against a prompt, the pairwise logistic preference loss, noise-matched
//! training and win/lose selection over candidate pools.

mod loss;
mod scorer;
mod select;
mod train;

use rand::Rng;

pub use loss::{preference_loss, preference_loss_grad, preference_probability};
pub use scorer::{cosine, ParamGroup, ScoreTrace, Scorer, ScorerSpec};
pub use select::{best_worst, select_indices, PairSelection, StepPreference};
pub use train::{
    batch_loss_and_grad, noise_pair, pairwise_accuracy, train_scorer, train_step, PreferencePair,
    ScorerTrainConfig,
};

use crate::error::{Error, Result};

/// A frozen reward source that scores intermediate states.
pub trait StepScorer {
    fn step_score(&self, x: &[f64], t: usize, prompt: usize) -> Result<f64>;
    fn is_frozen(&self) -> bool;
}

impl StepScorer for Scorer {
    fn step_score(&self, x: &[f64], t: usize, prompt: usize) -> Result<f64> {
        self.score(x, t, prompt)
    }

    fn is_frozen(&self) -> bool {
        Scorer::is_frozen(self)
    }
}

pub fn score_candidates(
    scorer: &impl StepScorer,
    candidates: &[Vec<f64>],
    t: usize,
    prompt: usize,
) -> Result<Vec<f64>> {
    candidates
        .iter()
        .map(|c| scorer.step_score(c, t, prompt))
        .collect()
}

/// Scores every candidate and returns the top- and bottom-ranked pair.
pub fn rank_and_select(
    scorer: &impl StepScorer,
    candidates: &[Vec<f64>],
    t: usize,
    prompt: usize,
) -> Result<StepPreference> {
    if candidates.len() < 2 {
        return Err(Error::usage(format!(
            "need at least two candidates, got {}",
            candidates.len()
        )));
    }
    if !scorer.is_frozen() {
        return Err(Error::usage("candidate ranking requires a frozen scorer"));
    }
    let scores = score_candidates(scorer, candidates, t, prompt)?;
    let idx = best_worst(&scores)?;
    Ok(select::build_preference(
        candidates, &scores, idx, t, prompt,
    ))
}

/// [`rank_and_select`] with a configurable pair-selection strategy.
pub fn select_pair<R: Rng + ?Sized>(
    scorer: &impl StepScorer,
    candidates: &[Vec<f64>],
    t: usize,
    prompt: usize,
    strategy: PairSelection,
    rng: &mut R,
) -> Result<StepPreference> {
    if strategy == PairSelection::BestWorst {
        return rank_and_select(scorer, candidates, t, prompt);
    }
    if candidates.len() < 2 {
        return Err(Error::usage("need at least two candidates"));
    }
    if !scorer.is_frozen() {
        return Err(Error::usage("candidate ranking requires a frozen scorer"));
    }
    let scores = score_candidates(scorer, candidates, t, prompt)?;
    let idx = select_indices(&scores, strategy, rng)?;
    Ok(select::build_preference(
        candidates, &scores, idx, t, prompt,
    ))
}

//! Stepwise preference alignment for conditional diffusion models.
//!
//! The crate trains a small ε-prediction diffusion policy on a synthetic
//! class-conditioned signal task, fits a time-conditioned contrastive scorer
//! on noise-matched preference pairs, and then post-trains the policy so that
//! at each denoising step its win-minus-lose log-likelihood-ratio gap against
//! a frozen reference matches the scorer's reward gap.

// Negated comparisons such as `!(x > 0.0)` reject NaN on purpose.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod baselines;
pub mod config;
pub mod diffusion;
pub mod easpm;
pub mod easpo;
pub mod error;
pub mod numerics;
pub mod pipeline;
pub mod pretrain;
pub mod rng;
pub mod task;

pub use error::{Error, Result};

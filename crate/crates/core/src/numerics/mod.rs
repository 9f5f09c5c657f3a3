//! Dense-vector math, a small tanh MLP with exact reverse-mode gradients,
//! Adam, finite-difference gradient checking and the parameter checkpoint
//! format shared by every trainable model in the crate.

mod adam;
mod checkpoint;
mod gradcheck;
mod mlp;
mod params;
pub mod vector;

pub use adam::{adam_step, adam_step_grouped, AdamConfig};
pub use checkpoint::{load_checkpoint, save_checkpoint, CheckpointManifest, ManifestBlock};
pub use gradcheck::finite_diff_check;
pub use mlp::{time_features, Activation, Dense, Mlp, MlpTrace, NetworkSpec, TIME_FEATURES};
pub use params::{BlockId, BlockInfo, ParamStore};

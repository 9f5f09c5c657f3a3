//! Noise schedule, forward diffusion and the Gaussian reverse policy.

mod policy;
mod schedule;
mod trajectory;

pub use policy::{
    check_same_schedule, forward_sample, gaussian_log_density, log_ratio, log_ratio_from_means,
    mean_from_noise, perturb_mean, pseudo_clean, reverse_mean, reverse_sample, DenoiserSpec,
    DiffusionPolicy, LatentState, NoisePredictor,
};
pub use schedule::{NoiseSchedule, ScheduleConfig, VarianceKind};
pub use trajectory::{
    replay, sample_trajectory, ReplayReport, StepRecord, Trajectory, TrajectoryDump,
};

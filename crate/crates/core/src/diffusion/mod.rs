//! Conditional DDPM over labelled points: schedule, forward noising, the
//! denoising loss, and reverse sampling with exact per-step likelihoods.

pub mod data;
pub mod model;
pub mod sampling;
pub mod schedule;
pub mod train;

pub use data::{sample_dataset, Context, DiffusionMdpConfig, LabeledPoint, MixtureSpec};
pub use model::{EpsNet, EpsNetSpec, NoisePredictor, ZeroPredictor};
pub use sampling::{
    gaussian_logprob, reverse_mean, reverse_mean_from_eps, rollout_from, sample_finals,
    sample_trajectories, sample_trajectory, DifferentiablePolicy, DiffusionPolicy, GaussianPolicy,
    Trajectory,
};
pub use schedule::{q_sample, NoiseSchedule};
pub use train::{ddpm_loss, ddpm_train_step, train_denoiser};

//! Critic-guided reinforcement unlearning for a small conditional diffusion model.
//!
//! The crate is organised bottom-up:
//!
//! - [`numerics`]: dense/FiLM networks with exact backward passes, Adam, checkpoints.
//! - [`diffusion`]: the DDPM itself, seen as a Gaussian policy over denoising steps.
//! - [`rewards`]: classifier and distance rewards on final samples.
//! - [`critic`]: the timestep-conditioned value network and its regression.
//! - [`policy_grad`]: terminal-reward, importance-sampled and advantage-weighted estimators.
//! - [`metrics`]: unlearning/retain accuracy and the Fréchet distance.
//! - [`pipeline`]: configuration, phases and run artifacts.

pub mod critic;
pub mod diffusion;
pub mod error;
pub mod metrics;
pub mod numerics;
pub mod pipeline;
pub mod policy_grad;
pub mod rewards;
pub mod rng;

pub use diffusion::{Context, EpsNet, EpsNetSpec, MixtureSpec, NoiseSchedule, Trajectory};
pub use error::{Error, Result};
pub use numerics::{AdamState, Network, Tensor};

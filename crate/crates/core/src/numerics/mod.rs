//! Small differentiable-network substrate: dense/FiLM layers, activations,
//! timestep embeddings, Adam and checkpoints.

pub mod adam;
pub mod checkpoint;
pub mod embed;
pub mod network;
pub mod tensor;

pub use adam::{clip_global_norm, l2_norm, AdamState};
pub use embed::{embedding_table, sinusoidal_embed};
pub use network::{Activation, Layer, Network, Tape};
pub use tensor::Tensor;

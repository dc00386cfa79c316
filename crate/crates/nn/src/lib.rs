//! Minimal numerical substrate for the dialogue models: dense `f64` matrices,
//! a reverse-mode autodiff tape, common layers, Adam, and the on-disk
//! checkpoint container.
//!
//! Everything runs single-threaded in 64-bit floating point, so training is
//! bitwise reproducible for a given seed.

pub mod checkpoint;
pub mod layers;
pub mod mat;
pub mod params;
pub mod tape;

pub use checkpoint::{Checkpoint, CheckpointError};
pub use layers::{causal_mask, AttentionOutput, GruCell, LayerNorm, Linear, MultiHeadAttention};
pub use mat::{argmax, log_softmax, softmax, Mat};
pub use params::{Adam, AdamConfig, GradBuffer, ParamId, ParamStore};
pub use tape::{Grads, Tape, Var};

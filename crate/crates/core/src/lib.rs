//! Deterministic desk-scale diffusion engine.
//!
//! The crate implements a toy latent-free diffusion stack — tensors with
//! reverse-mode gradients, variance schedules with DDIM sampling/inversion,
//! a patch-token denoiser with per-layer activation taps — and on top of it
//! cross-model content injection: captured source state is blended into a
//! target model's residual and self-attention activations during denoising,
//! so the target's style renders the source's structure. Pipelines cover
//! novel cross-model generation, style transfer of real images via DDIM
//! inversion, masked regional injection, and stylized prompt editing, with
//! deterministic descriptor-space metrics for evaluating the results.

pub mod codec;
pub mod conditioner;
pub mod denoiser;
pub mod error;
pub mod injection;
pub mod metrics;
pub mod pipelines;
pub mod provenance;
pub mod rng;
pub mod schedule;
pub mod tape;
pub mod tensor;
pub mod trainer;

pub use error::{Error, Result};
pub use tensor::{Scalar, Tensor};

//! Image editing as two-frame video generation.
//!
//! An edit pair `(condition, target)` is encoded as a short latent video and
//! modeled with rectified flow. At sampling time, intermediate "reasoning"
//! latent frames may be denoised jointly with the target for the first few
//! solver steps and then dropped. A distribution-matching distillation loop
//! turns a many-step teacher into a few-step student.
//!
//! Module map:
//! - [`tensor`], [`autodiff`], [`gradcheck`], [`rng`], [`optim`]: numeric substrate
//! - [`codec`]: block-mean causal video codec and PPM frame I/O
//! - [`denoiser`]: attention denoiser with factorized rotary positions
//! - [`flow`]: flow-matching objective, batching, and training step
//! - [`sampler`]: two-stage ODE sampler with reasoning-token drop
//! - [`oracle`], [`diagnostics`]: closed-form velocity and score fields, sampler checks
//! - [`dmd`]: few-step distillation
//! - [`worldgen`]: procedural edit episodes with exact ground truth
//! - [`metrics`], [`checkpoint`]: evaluation and persistence

pub mod autodiff;
pub mod checkpoint;
pub mod codec;
pub mod denoiser;
pub mod diagnostics;
pub mod dmd;
mod error;
pub mod flow;
pub mod gradcheck;
pub mod metrics;
pub mod optim;
pub mod oracle;
pub mod params;
pub mod rng;
pub mod sampler;
pub mod tensor;
pub mod worldgen;

pub use error::{Error, Result};
pub use params::{Gradients, ParamSet};
pub use rng::CounterRng;
pub use tensor::Tensor;

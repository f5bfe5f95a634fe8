//! Desk-scale toolkit for high-resolution generation experiments on a tiny
//! flow-matching Diffusion Transformer.
//!
//! The crate is organised bottom-up:
//!
//! * [`numcore`]: f64 tensors, a PCG32 random stream and a reverse-mode tape.
//! * [`flowmatch`]: linear-schedule interpolation, velocity targets and
//!   probability-flow ODE samplers.
//! * [`gclfa`]: inward sliding-window masks, axial 2D RoPE, pooled coarse
//!   tokens and the blocked attention executor with its dense oracle.
//! * [`relay_lora`]: LoRA algebra, the two-stage relay protocol and the VBCP
//!   checkpoint format.
//! * [`hfato`]: downsample/upsample degradation and clean-latent supervision.
//! * [`toydit`]: the toy velocity model, synthetic data, training and the
//!   coarse-to-fine sampler.
//! * [`config`]: the JSON run configuration shared with the CLI.
//! * [`eval`]: paired held-out and detail-gain evaluations of a relay.
//! * [`bench`]: the dense-versus-blocked attention timing sweep.

pub mod bench;
pub mod config;
pub mod eval;
mod error;
pub mod flowmatch;
pub mod gclfa;
pub mod hfato;
pub mod numcore;
pub mod par;
pub mod relay_lora;
pub mod toydit;

pub use error::{Error, Result};
pub use numcore::{Rng, Tape, Tensor, Var};

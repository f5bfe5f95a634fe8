//! A tiny pixel-token Diffusion Transformer, synthetic data, training and
//! the coarse-to-fine sampler.

mod data;
mod model;
mod sample;
mod train;

pub use data::{SyntheticDataset, TEXTURE_AMPLITUDE};
pub use model::{AdapterVars, AttentionMode, BoundWeights, DitConfig, ToyDiT, LAYER_WEIGHTS};
pub use sample::{coarse_to_fine_sample, sample, CoarseToFine, SamplerConfig};
pub use train::{
    expand_targets, pretrain_base, record_sample_loss, train, AdamConfig, Objective, TrainConfig, TrainOutcome,
    Trainable,
};

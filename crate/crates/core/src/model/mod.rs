//! Transformer autoencoder: input projection plus learned positional
//! encoding, a stack of post-norm transformer layers with batch
//! normalization, and an affine per-time-point reconstruction head.

mod check;
mod config;
mod forward;
mod params;

pub use check::check_model_gradients;
pub use config::ModelConfig;
pub use forward::{
    embed, multi_head_attention, single_head_attention, transformer_layer, BoundHead, BoundLayer, BoundParams,
    GraphOutput, LayerOutput, Reconstruction,
};
pub use params::{HeadParams, LayerParams, ModelParams, NormParams};

#[cfg(test)]
mod tests;

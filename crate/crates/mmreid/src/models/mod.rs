//! Model parts: visual encoder, projection, causal LM, checkpoints.

pub mod blocks;
pub mod checkpoint;
pub mod encoder;
pub mod lm;
pub mod params;

pub use checkpoint::{load_checkpoint, save_checkpoint, Checkpoint};
pub use encoder::{encode_image, patchify, reid_embed, TapPoint, VisualEncoderConfig};
pub use lm::{
    init_lm, init_projection, lm_forward, pool_image_latents, project, CausalLmConfig, LatentPool,
    LmOutput,
};
pub use params::ParamSet;

//! Small Vision Transformer whose attention and FFN blocks take per-task masks.

mod checkpoint;
mod config;
mod model;

pub use checkpoint::{MAGIC as CHECKPOINT_MAGIC, VERSION as CHECKPOINT_VERSION};
pub use config::ViTConfig;
pub use model::{
    patchify, Backbone, BoundBackbone, BoundLayer, EncoderLayer, Head, LayerMaskVars, LayerMaskView, Masks,
    ViTModel,
};

//! The U-shaped segmentation network and its building blocks.

mod block;
mod checkpoint;
mod layers;
mod model;

pub use block::AnchorKanBlock;
pub use checkpoint::{
    config_hash, load_checkpoint, load_params_for, manifest_hash, save_checkpoint, Checkpoint,
};
pub use layers::{Affine, Conv, ConvNormAct};
pub use model::{predict_mask, ForwardOptions, ModelConfig, MyGoModel, DEPTH};

//! Vision and text towers, the paired CLIP model and analytic accounting.

mod accounting;
mod clip;
mod config;
mod forward;
mod weights;

pub use accounting::{count_parameters, forward_gflops, forward_macs, forward_macs_for_tokens};
pub use clip::ClipModel;
pub use config::{
    describe, ClipConfig, Modality, NormKind, RawTowerConfig, TowerConfig, TowerInput, CLIP_CONTEXT_LENGTH,
    CLIP_VOCAB_SIZE, DEFAULT_MLP_RATIO, DEFAULT_NORM_EPS, DEFAULT_TEMPERATURE,
};
pub use forward::{
    gather_visible_tokens,
    encode_image, encode_text, end_positions, image_token_features, patchify, text_forward, vision_forward,
    VisionOutput,
};
pub use weights::{build_tower, BoundTower, TowerWeights};

//! Closed-form parameter and compute accounting for a tower.

use super::config::{NormKind, TowerConfig, TowerInput};

/// Exact number of scalar parameters [`super::build_tower`] creates.
pub fn count_parameters(config: &TowerConfig) -> u64 {
    let d = config.width as u64;
    let h = config.mlp_hidden() as u64;
    let norm = match config.norm_kind {
        NormKind::Rms => d,
        NormKind::Layer => 2 * d,
    };
    let qkv_bias = if config.qkv_bias { 3 * d } else { 0 };
    let block = 2 * norm + 3 * d * d + qkv_bias + d * d + d + d * h + h + h * d + d;
    let embed = match config.input {
        TowerInput::Vision { .. } => {
            let pd = config.patch_dim().unwrap_or(0) as u64;
            let seq = config.sequence_length() as u64;
            pd * d + d + d + seq * d
        }
        TowerInput::Text { vocab_size, context_length, .. } => (vocab_size as u64 + context_length as u64) * d,
    };
    embed + config.layers as u64 * block + norm + d * config.projection_dim as u64
}

/// Multiply-accumulates of one forward pass over a single sample whose
/// blocks see `tokens` positions.
pub fn forward_macs_for_tokens(config: &TowerConfig, tokens: usize) -> u64 {
    let d = config.width as u64;
    let h = config.mlp_hidden() as u64;
    let l = tokens as u64;
    let embed = match config.input {
        TowerInput::Vision { .. } => config.num_patches().unwrap_or(0) as u64 * config.patch_dim().unwrap_or(0) as u64 * d,
        // token embedding is a table lookup
        TowerInput::Text { .. } => 0,
    };
    let per_block = 4 * l * d * d + 2 * l * l * d + 2 * l * d * h;
    embed + config.layers as u64 * per_block + d * config.projection_dim as u64
}

/// Multiply-accumulates of one full forward pass over one sample.
pub fn forward_macs(config: &TowerConfig) -> u64 {
    forward_macs_for_tokens(config, config.sequence_length())
}

/// Forward GFLOPs of one sample, counting a multiply-accumulate as two FLOPs.
pub fn forward_gflops(config: &TowerConfig) -> f64 {
    2.0 * forward_macs(config) as f64 / 1e9
}

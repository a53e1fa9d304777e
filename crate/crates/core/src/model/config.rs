use alloc::string::String;

use serde::{Deserialize, Serialize};

use crate::error::{bail, Error, Result};

/// Normalisation used inside a tower.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NormKind {
    Rms,
    Layer,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Modality {
    Vision,
    Text,
}

/// What a tower consumes.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TowerInput {
    /// Square images cut into non-overlapping square patches.
    Vision { patch_size: usize, input_resolution: usize, channels: usize },
    /// Token sequences pooled at the first end-of-text token.
    Text { vocab_size: usize, context_length: usize, end_token: usize },
}

/// Architecture of one encoder tower.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "RawTowerConfig", into = "RawTowerConfig")]
pub struct TowerConfig {
    pub layers: usize,
    pub width: usize,
    pub heads: usize,
    pub mlp_ratio: usize,
    pub norm_kind: NormKind,
    pub qkv_bias: bool,
    pub norm_eps: f64,
    pub projection_dim: usize,
    pub input: TowerInput,
}

pub const DEFAULT_MLP_RATIO: usize = 4;
pub const DEFAULT_NORM_EPS: f64 = 1e-6;
pub const CLIP_VOCAB_SIZE: usize = 49408;
pub const CLIP_CONTEXT_LENGTH: usize = 77;

impl TowerConfig {
    /// Vision tower in the EVA style: RMSNorm and no Q/K/V biases.
    pub fn vision(layers: usize, width: usize, heads: usize, patch_size: usize, input_resolution: usize, projection_dim: usize) -> Self {
        Self {
            layers,
            width,
            heads,
            mlp_ratio: DEFAULT_MLP_RATIO,
            norm_kind: NormKind::Rms,
            qkv_bias: false,
            norm_eps: DEFAULT_NORM_EPS,
            projection_dim,
            input: TowerInput::Vision { patch_size, input_resolution, channels: 3 },
        }
    }

    /// Text tower in the CLIP style: LayerNorm with Q/K/V biases.
    pub fn text(layers: usize, width: usize, heads: usize, vocab_size: usize, context_length: usize, projection_dim: usize) -> Self {
        Self {
            layers,
            width,
            heads,
            mlp_ratio: DEFAULT_MLP_RATIO,
            norm_kind: NormKind::Layer,
            qkv_bias: true,
            norm_eps: 1e-5,
            projection_dim,
            input: TowerInput::Text { vocab_size, context_length, end_token: vocab_size - 1 },
        }
    }

    /// The 32-layer, 1280-wide text tower shared by the large models, with the
    /// standard CLIP vocabulary and context.
    pub fn large_text_tower() -> Self {
        Self::text(32, 1280, 20, CLIP_VOCAB_SIZE, CLIP_CONTEXT_LENGTH, 1024)
    }

    pub fn modality(&self) -> Modality {
        match self.input {
            TowerInput::Vision { .. } => Modality::Vision,
            TowerInput::Text { .. } => Modality::Text,
        }
    }

    pub fn head_dim(&self) -> usize {
        self.width / self.heads
    }

    pub fn mlp_hidden(&self) -> usize {
        self.width * self.mlp_ratio
    }

    /// Patches per image side, vision only.
    pub fn grid(&self) -> Option<usize> {
        match self.input {
            TowerInput::Vision { patch_size, input_resolution, .. } => Some(input_resolution / patch_size),
            TowerInput::Text { .. } => None,
        }
    }

    /// Number of patch tokens (vision) excluding the class token.
    pub fn num_patches(&self) -> Option<usize> {
        self.grid().map(|g| g * g)
    }

    /// Full sequence length seen by the blocks: patches + class token, or the
    /// text context.
    pub fn sequence_length(&self) -> usize {
        match self.input {
            TowerInput::Vision { .. } => self.num_patches().unwrap_or(0) + 1,
            TowerInput::Text { context_length, .. } => context_length,
        }
    }

    pub fn patch_dim(&self) -> Option<usize> {
        match self.input {
            TowerInput::Vision { patch_size, channels, .. } => Some(patch_size * patch_size * channels),
            TowerInput::Text { .. } => None,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.width == 0 || self.heads == 0 || self.projection_dim == 0 {
            bail!(Config, "width, heads and projection_dim must be positive");
        }
        if self.width % self.heads != 0 {
            bail!(Config, "width {} is not divisible by heads {}", self.width, self.heads);
        }
        if self.mlp_ratio == 0 {
            bail!(Config, "mlp_ratio must be positive");
        }
        if self.norm_kind == NormKind::Rms && self.qkv_bias {
            bail!(Config, "rms-norm towers carry no q/k/v biases; set qkv_bias = false");
        }
        if !(self.norm_eps > 0.0) {
            bail!(Config, "norm_eps must be positive, got {}", self.norm_eps);
        }
        match self.input {
            TowerInput::Vision { patch_size, input_resolution, channels } => {
                if patch_size == 0 || input_resolution == 0 || channels == 0 {
                    bail!(Config, "patch_size, input_resolution and channels must be positive");
                }
                if input_resolution % patch_size != 0 {
                    bail!(Config, "input_resolution {} is not divisible by patch_size {}", input_resolution, patch_size);
                }
            }
            TowerInput::Text { vocab_size, context_length, end_token } => {
                if vocab_size == 0 || context_length == 0 {
                    bail!(Config, "vocab_size and context_length must be positive");
                }
                if end_token >= vocab_size {
                    bail!(Config, "end_token {} outside vocabulary of {}", end_token, vocab_size);
                }
            }
        }
        Ok(())
    }
}

/// Flat on-disk form of [`TowerConfig`].
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RawTowerConfig {
    pub modality: Modality,
    pub layers: usize,
    pub width: usize,
    pub heads: usize,
    #[serde(default = "default_mlp_ratio")]
    pub mlp_ratio: usize,
    pub norm_kind: NormKind,
    pub qkv_bias: bool,
    #[serde(default = "default_norm_eps")]
    pub norm_eps: f64,
    pub projection_dim: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub patch_size: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub input_resolution: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub channels: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub vocab_size: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub context_length: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub end_token: Option<usize>,
}

fn default_mlp_ratio() -> usize {
    DEFAULT_MLP_RATIO
}

fn default_norm_eps() -> f64 {
    DEFAULT_NORM_EPS
}

fn required(value: Option<usize>, key: &str, modality: &str) -> Result<usize> {
    value.ok_or_else(|| Error::Config(alloc::format!("{modality} tower requires `{key}`")))
}

fn forbid(value: Option<usize>, key: &str, modality: &str) -> Result<()> {
    if value.is_some() {
        bail!(Config, "`{key}` is not a {modality} tower key");
    }
    Ok(())
}

impl TryFrom<RawTowerConfig> for TowerConfig {
    type Error = Error;

    fn try_from(raw: RawTowerConfig) -> Result<Self> {
        let input = match raw.modality {
            Modality::Vision => {
                forbid(raw.vocab_size, "vocab_size", "vision")?;
                forbid(raw.context_length, "context_length", "vision")?;
                forbid(raw.end_token, "end_token", "vision")?;
                TowerInput::Vision {
                    patch_size: required(raw.patch_size, "patch_size", "vision")?,
                    input_resolution: required(raw.input_resolution, "input_resolution", "vision")?,
                    channels: raw.channels.unwrap_or(3),
                }
            }
            Modality::Text => {
                forbid(raw.patch_size, "patch_size", "text")?;
                forbid(raw.input_resolution, "input_resolution", "text")?;
                forbid(raw.channels, "channels", "text")?;
                let vocab_size = required(raw.vocab_size, "vocab_size", "text")?;
                TowerInput::Text {
                    vocab_size,
                    context_length: required(raw.context_length, "context_length", "text")?,
                    end_token: raw.end_token.unwrap_or(vocab_size.saturating_sub(1)),
                }
            }
        };
        let config = TowerConfig {
            layers: raw.layers,
            width: raw.width,
            heads: raw.heads,
            mlp_ratio: raw.mlp_ratio,
            norm_kind: raw.norm_kind,
            qkv_bias: raw.qkv_bias,
            norm_eps: raw.norm_eps,
            projection_dim: raw.projection_dim,
            input,
        };
        config.validate()?;
        Ok(config)
    }
}

impl From<TowerConfig> for RawTowerConfig {
    fn from(c: TowerConfig) -> Self {
        let mut raw = RawTowerConfig {
            modality: c.modality(),
            layers: c.layers,
            width: c.width,
            heads: c.heads,
            mlp_ratio: c.mlp_ratio,
            norm_kind: c.norm_kind,
            qkv_bias: c.qkv_bias,
            norm_eps: c.norm_eps,
            projection_dim: c.projection_dim,
            patch_size: None,
            input_resolution: None,
            channels: None,
            vocab_size: None,
            context_length: None,
            end_token: None,
        };
        match c.input {
            TowerInput::Vision { patch_size, input_resolution, channels } => {
                raw.patch_size = Some(patch_size);
                raw.input_resolution = Some(input_resolution);
                raw.channels = Some(channels);
            }
            TowerInput::Text { vocab_size, context_length, end_token } => {
                raw.vocab_size = Some(vocab_size);
                raw.context_length = Some(context_length);
                raw.end_token = Some(end_token);
            }
        }
        raw
    }
}

/// Fixed contrastive temperature used for pretraining.
pub const DEFAULT_TEMPERATURE: f64 = 0.01;

/// A paired image/text model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ClipConfig {
    pub vision: TowerConfig,
    pub text: TowerConfig,
    /// τ; logits are cosine similarities divided by τ.
    #[serde(default = "default_temperature")]
    pub temperature: f64,
    #[serde(default)]
    pub temperature_learnable: bool,
}

fn default_temperature() -> f64 {
    DEFAULT_TEMPERATURE
}

impl ClipConfig {
    pub fn new(vision: TowerConfig, text: TowerConfig) -> Self {
        Self { vision, text, temperature: DEFAULT_TEMPERATURE, temperature_learnable: false }
    }

    pub fn validate(&self) -> Result<()> {
        self.vision.validate()?;
        self.text.validate()?;
        if self.vision.modality() != Modality::Vision {
            bail!(Config, "clip.vision must be a vision tower");
        }
        if self.text.modality() != Modality::Text {
            bail!(Config, "clip.text must be a text tower");
        }
        if !(self.temperature > 0.0) {
            bail!(Config, "temperature must be positive, got {}", self.temperature);
        }
        if self.vision.projection_dim != self.text.projection_dim {
            bail!(
                Config,
                "projection dims differ: vision {} vs text {}",
                self.vision.projection_dim,
                self.text.projection_dim
            );
        }
        Ok(())
    }
}

/// Human-readable one-line summary, e.g. for lineage records.
pub fn describe(config: &TowerConfig) -> String {
    alloc::format!(
        "{:?} L{} W{} H{} {:?}",
        config.modality(),
        config.layers,
        config.width,
        config.heads,
        config.norm_kind
    )
}

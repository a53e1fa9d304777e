use super::accounting::count_parameters;
use super::config::ClipConfig;
use super::weights::{build_tower, TowerWeights};
use crate::error::Result;
use alloc::format;
use alloc::string::String;
use sha2::{Digest, Sha256};

/// A paired model: configuration plus both towers' weights.
#[derive(Debug, Clone, PartialEq)]
pub struct ClipModel {
    pub config: ClipConfig,
    pub vision: TowerWeights,
    pub text: TowerWeights,
}

impl ClipModel {
    /// Fresh model; the text tower is seeded with `seed + 1`.
    pub fn build(config: ClipConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let vision = build_tower(&config.vision, seed)?;
        let text = build_tower(&config.text, seed.wrapping_add(1))?;
        Ok(Self { config, vision, text })
    }

    /// Wraps existing weights after checking them against the config.
    pub fn from_parts(config: ClipConfig, vision: TowerWeights, text: TowerWeights) -> Result<Self> {
        config.validate()?;
        vision.check_against(&config.vision)?;
        text.check_against(&config.text)?;
        Ok(Self { config, vision, text })
    }

    pub fn vision_parameters(&self) -> u64 {
        count_parameters(&self.config.vision)
    }

    pub fn text_parameters(&self) -> u64 {
        count_parameters(&self.config.text)
    }

    pub fn total_parameters(&self) -> u64 {
        self.vision_parameters() + self.text_parameters()
    }

    /// SHA-256 over both towers' content hashes and the temperature.
    pub fn content_hash(&self) -> String {
        let mut h = Sha256::new();
        h.update(b"vision:");
        h.update(self.vision.content_hash().as_bytes());
        h.update(b"text:");
        h.update(self.text.content_hash().as_bytes());
        h.update(self.config.temperature.to_le_bytes());
        h.finalize().iter().map(|b| format!("{b:02x}")).collect()
    }
}

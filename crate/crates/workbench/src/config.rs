//! Configuration files (TOML, unknown keys rejected) and the flat
//! `key = value` dump every subcommand prints.

use std::path::{Path, PathBuf};

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use clipladder_core::eval::{TransformMode, VideoMetric};
use clipladder_core::model::{ClipConfig, TowerConfig};
use clipladder_core::optim::OptimConfig;
use clipladder_core::train::{DistillOptions, TrainStage};

use crate::error::{read_text, Error, Result};

/// Parses a TOML file; syntax and schema errors become config errors that
/// name the file and the offending key.
pub fn load_toml<T: DeserializeOwned>(path: &Path) -> Result<T> {
    parse_toml(&read_text(path)?, &path.display().to_string())
}

pub fn parse_toml<T: DeserializeOwned>(text: &str, origin: &str) -> Result<T> {
    toml::from_str(text).map_err(|e| Error::config(format!("{origin}: {}", e.to_string().trim_end())))
}

/// Resolves `p` against the directory of the file that mentioned it.
pub fn resolve(base_file: &Path, p: &Path) -> PathBuf {
    if p.is_absolute() {
        p.to_path_buf()
    } else {
        base_file.parent().unwrap_or(Path::new(".")).join(p)
    }
}

fn default_log_every() -> u64 {
    10
}

/// What `count` reports on.
#[derive(Debug, Clone, PartialEq)]
pub enum CountTarget {
    Tower(TowerConfig),
    Clip(ClipConfig),
}

/// A file holding a tower (top-level `modality` key) or a CLIP pair
/// (`[vision]` and `[text]` tables).
pub fn load_count_target(path: &Path) -> Result<CountTarget> {
    let text = read_text(path)?;
    let origin = path.display().to_string();
    let table: toml::Table = parse_toml(&text, &origin)?;
    if table.contains_key("modality") {
        Ok(CountTarget::Tower(parse_toml(&text, &origin)?))
    } else {
        Ok(CountTarget::Clip(parse_toml(&text, &origin)?))
    }
}

/// `distill`: grow a student vision tower from a teacher checkpoint.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DistillConfig {
    /// Teacher checkpoint, relative to this file.
    pub teacher: PathBuf,
    pub student: TowerConfig,
    pub stage: TrainStage,
    #[serde(default)]
    pub optim: OptimConfig,
    #[serde(default)]
    pub distillation: DistillOptions,
    #[serde(default)]
    pub seed: u64,
}

/// `train-clip`: contrastive stages from a checkpoint or from scratch.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainClipConfig {
    /// Starting checkpoint, relative to this file; exclusive with `model`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub init: Option<PathBuf>,
    /// Architecture for a fresh start.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub model: Option<ClipConfig>,
    pub stages: Vec<TrainStage>,
    #[serde(default)]
    pub optim: OptimConfig,
    #[serde(default = "default_log_every")]
    pub log_every: u64,
    #[serde(default)]
    pub seed: u64,
}

/// Zero-shot evaluation split settings used by `cycle`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CycleEval {
    #[serde(default = "default_test_split")]
    pub split: String,
    #[serde(default = "default_transform")]
    pub transform: TransformMode,
}

fn default_test_split() -> String {
    "test".into()
}

fn default_transform() -> TransformMode {
    TransformMode::DirectResize
}

impl Default for CycleEval {
    fn default() -> Self {
        Self { split: default_test_split(), transform: default_transform() }
    }
}

fn all_transforms() -> Vec<TransformMode> {
    vec![TransformMode::DirectResize, TransformMode::ShortestSideCenterCrop]
}

fn default_ks() -> Vec<usize> {
    vec![1, 5, 10]
}

/// One entry of an evaluation manifest.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum BenchmarkSpec {
    /// Prompt-ensembled classification, scored under every listed transform.
    ZeroShot {
        name: String,
        split: String,
        #[serde(default = "all_transforms")]
        transforms: Vec<TransformMode>,
        /// Prompt templates with one `{}` slot; the corpus defaults when absent.
        #[serde(default, skip_serializing_if = "Option::is_none")]
        templates: Option<Vec<String>>,
    },
    /// Image-caption retrieval with the split's own captions.
    Retrieval {
        name: String,
        split: String,
        #[serde(default = "default_ks")]
        ks: Vec<usize>,
    },
    /// Clip classification from averaged frame embeddings.
    Video {
        name: String,
        split: String,
        frames: usize,
        metric: VideoMetric,
    },
    /// Logistic regression on frozen image embeddings.
    LinearProbe {
        name: String,
        train_split: String,
        test_split: String,
        #[serde(default)]
        l2: f64,
        iterations: usize,
    },
}

impl BenchmarkSpec {
    pub fn name(&self) -> &str {
        match self {
            BenchmarkSpec::ZeroShot { name, .. }
            | BenchmarkSpec::Retrieval { name, .. }
            | BenchmarkSpec::Video { name, .. }
            | BenchmarkSpec::LinearProbe { name, .. } => name,
        }
    }
}

/// Anchor benchmark and its shifted variants for a robustness gap.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RobustnessSpec {
    pub anchor: String,
    pub variants: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvalManifest {
    #[serde(rename = "benchmark")]
    pub benchmarks: Vec<BenchmarkSpec>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub robustness: Option<RobustnessSpec>,
    #[serde(default)]
    pub seed: u64,
}

impl EvalManifest {
    pub fn validate(&self) -> Result<()> {
        if self.benchmarks.is_empty() {
            return Err(Error::config("manifest lists no benchmarks"));
        }
        for (i, b) in self.benchmarks.iter().enumerate() {
            if self.benchmarks[..i].iter().any(|o| o.name() == b.name()) {
                return Err(Error::config(format!("benchmark[{i}].name `{}` is repeated", b.name())));
            }
            match b {
                BenchmarkSpec::ZeroShot { transforms, .. } if transforms.is_empty() => {
                    return Err(Error::config(format!("benchmark[{i}].transforms is empty")));
                }
                BenchmarkSpec::Retrieval { ks, .. } if ks.is_empty() || ks.contains(&0) => {
                    return Err(Error::config(format!("benchmark[{i}].ks must be non-empty and positive")));
                }
                BenchmarkSpec::Video { frames: 0, .. } => {
                    return Err(Error::config(format!("benchmark[{i}].frames must be positive")));
                }
                _ => {}
            }
        }
        if let Some(r) = &self.robustness {
            for n in std::iter::once(&r.anchor).chain(&r.variants) {
                if !self.benchmarks.iter().any(|b| b.name() == n && matches!(b, BenchmarkSpec::ZeroShot { .. })) {
                    return Err(Error::config(format!("robustness refers to `{n}`, which is not a zero_shot benchmark")));
                }
            }
            if r.variants.is_empty() {
                return Err(Error::config("robustness.variants is empty"));
            }
        }
        Ok(())
    }
}

/// Formats a float so small magnitudes use exponent notation (`4e-4`) and
/// the rest plain decimals (`0.75`).
pub fn format_float(v: f64) -> String {
    if v != 0.0 && v.is_finite() && v.abs() < 1e-2 {
        format!("{v:e}")
    } else {
        format!("{v}")
    }
}

fn flatten(prefix: &str, v: &toml::Value, out: &mut Vec<String>) {
    match v {
        toml::Value::Table(t) => {
            for (k, v) in t {
                let key = if prefix.is_empty() { k.clone() } else { format!("{prefix}.{k}") };
                flatten(&key, v, out);
            }
        }
        toml::Value::Array(items) if items.iter().any(|i| i.is_table()) => {
            for (i, item) in items.iter().enumerate() {
                flatten(&format!("{prefix}[{i}]"), item, out);
            }
        }
        toml::Value::Array(items) => {
            let parts: Vec<String> = items.iter().map(scalar).collect();
            out.push(format!("{prefix} = [{}]", parts.join(", ")));
        }
        other => out.push(format!("{prefix} = {}", scalar(other))),
    }
}

fn scalar(v: &toml::Value) -> String {
    match v {
        toml::Value::Float(f) => format_float(*f),
        toml::Value::String(s) => format!("{s:?}"),
        other => other.to_string(),
    }
}

/// Every effective setting as sorted-by-structure `key = value` lines.
pub fn config_dump<T: Serialize>(value: &T) -> Result<String> {
    let v = toml::Value::try_from(value).map_err(|e| Error::Format(format!("cannot dump config: {e}")))?;
    let mut lines = Vec::new();
    flatten("", &v, &mut lines);
    Ok(lines.join("\n") + "\n")
}

use alloc::string::String;
use alloc::vec::Vec;

use super::preprocess::{preprocess_batch, TransformMode};
use super::zero_shot::{build_zero_shot_classifier, classify_zero_shot, ClassifyResult, PromptTemplateSet, Tokenizer, ZeroShotClassifier};
use crate::error::{bail, Result};
use crate::model::{encode_image, encode_text, ClipModel, TowerInput};
use crate::tensor::Tensor;

/// Rows per forward pass when embedding a benchmark.
pub const EVAL_CHUNK: usize = 64;

/// A labelled image set scored by prompt-ensembled zero-shot classification.
pub struct ZeroShotBenchmark<'a> {
    pub name: String,
    /// `[n, c, H, W]`, brought to the model resolution with `transform`.
    pub images: Tensor,
    pub labels: Vec<usize>,
    pub class_names: Vec<String>,
    pub templates: PromptTemplateSet,
    pub tokenizer: &'a dyn Tokenizer,
    pub transform: TransformMode,
}

/// Projected image embeddings of a batch, computed in chunks.
pub fn embed_images(model: &ClipModel, images: &Tensor, transform: TransformMode) -> Result<Tensor> {
    let TowerInput::Vision { input_resolution, .. } = model.config.vision.input else {
        bail!(Config, "model has no vision tower");
    };
    let n = images.shape().first().copied().unwrap_or(0);
    let mut parts = Vec::new();
    let mut start = 0;
    while start < n {
        let end = (start + EVAL_CHUNK).min(n);
        let chunk = images.slice_rows(start, end)?;
        let chunk = if chunk.shape()[2] == input_resolution && chunk.shape()[3] == input_resolution {
            chunk
        } else {
            preprocess_batch(&chunk, transform, input_resolution)?
        };
        parts.push(encode_image(&model.vision, &model.config.vision, &chunk, None)?);
        start = end;
    }
    Tensor::stack_rows(&parts)
}

/// Projected text embeddings of token rows, computed in chunks.
pub fn embed_texts(model: &ClipModel, tokens: &[Vec<usize>]) -> Result<Tensor> {
    let parts = tokens
        .chunks(EVAL_CHUNK)
        .map(|c| encode_text(&model.text, &model.config.text, c))
        .collect::<Result<Vec<_>>>()?;
    Tensor::stack_rows(&parts)
}

impl ZeroShotBenchmark<'_> {
    pub fn classifier(&self, model: &ClipModel) -> Result<ZeroShotClassifier> {
        build_zero_shot_classifier(&self.class_names, &self.templates, self.tokenizer, |rows| embed_texts(model, rows))
    }

    pub fn run(&self, model: &ClipModel) -> Result<ClassifyResult> {
        let clf = self.classifier(model)?;
        let emb = embed_images(model, &self.images, self.transform)?;
        classify_zero_shot(&emb, &clf, &self.labels)
    }
}

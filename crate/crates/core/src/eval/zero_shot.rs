use alloc::string::{String, ToString};
use alloc::vec::Vec;

use crate::error::{bail, Result};
use crate::tensor::{dot, normalize_rows, Tensor};

/// Placeholder replaced by the class name.
pub const SLOT: &str = "{}";

/// Seven prompts drawn from the usual CLIP prompt collections.
pub const DEFAULT_TEMPLATES: [&str; 7] = [
    "itap of a {}.",
    "a bad photo of the {}.",
    "a origami {}.",
    "a photo of the large {}.",
    "a {} in a video game.",
    "art of the {}.",
    "a photo of the small {}.",
];

/// Ordered prompt templates, each with exactly one `{}` slot.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PromptTemplateSet {
    templates: Vec<String>,
}

impl PromptTemplateSet {
    pub fn new<S: AsRef<str>>(templates: &[S]) -> Result<Self> {
        if templates.is_empty() {
            bail!(Config, "template set is empty");
        }
        for t in templates {
            let slots = t.as_ref().matches(SLOT).count();
            if slots != 1 {
                bail!(Config, "template `{}` has {slots} slots, expected exactly one", t.as_ref());
            }
        }
        Ok(Self { templates: templates.iter().map(|t| t.as_ref().to_string()).collect() })
    }

    pub fn default_set() -> Self {
        Self::new(&DEFAULT_TEMPLATES).expect("built-in templates are valid")
    }

    /// One template per line; blank lines and `#` comments are skipped.
    pub fn parse(text: &str) -> Result<Self> {
        let lines: Vec<&str> = text.lines().map(str::trim).filter(|l| !l.is_empty() && !l.starts_with('#')).collect();
        Self::new(&lines)
    }

    pub fn templates(&self) -> &[String] {
        &self.templates
    }

    pub fn fill(template: &str, class_name: &str) -> String {
        template.replacen(SLOT, class_name, 1)
    }
}

/// Text-to-token-id encoding used for prompts.
pub trait Tokenizer {
    fn context_length(&self) -> usize;
    /// Token count before padding or truncation, including begin and end.
    fn encoded_len(&self, text: &str) -> usize;
    /// Padded row of exactly `context_length` ids.
    fn encode(&self, text: &str) -> Result<Vec<usize>>;
}

/// One unit-norm text embedding per class.
#[derive(Debug, Clone, PartialEq)]
pub struct ZeroShotClassifier {
    class_names: Vec<String>,
    embeddings: Tensor,
}

impl ZeroShotClassifier {
    /// Wraps rows that must already have unit norm within 1e-9.
    pub fn from_embeddings(class_names: Vec<String>, embeddings: Tensor) -> Result<Self> {
        if embeddings.rank() != 2 || embeddings.shape()[0] != class_names.len() {
            bail!(Dimension, "{} class names for embeddings {:?}", class_names.len(), embeddings.shape());
        }
        let d = embeddings.shape()[1];
        for (i, row) in embeddings.data().chunks(d.max(1)).enumerate() {
            let n = libm::sqrt(dot(row, row));
            if (n - 1.0).abs() > 1e-9 {
                bail!(Contract, "classifier row {i} has norm {n}");
            }
        }
        Ok(Self { class_names, embeddings })
    }

    pub fn class_names(&self) -> &[String] {
        &self.class_names
    }

    pub fn embeddings(&self) -> &Tensor {
        &self.embeddings
    }

    pub fn num_classes(&self) -> usize {
        self.class_names.len()
    }
}

/// Prompt-ensembled classifier: for every class, embed each filled template,
/// normalise, average, and normalise again. `embed` maps token rows to raw
/// text embeddings `[rows, d]`.
pub fn build_zero_shot_classifier<T, F>(
    class_names: &[String],
    templates: &PromptTemplateSet,
    tokenizer: &T,
    mut embed: F,
) -> Result<ZeroShotClassifier>
where
    T: Tokenizer + ?Sized,
    F: FnMut(&[Vec<usize>]) -> Result<Tensor>,
{
    if class_names.is_empty() {
        bail!(Input, "no class names");
    }
    let ctx = tokenizer.context_length();
    let mut rows: Vec<f64> = Vec::new();
    let mut d = 0;
    for name in class_names {
        let mut tokens = Vec::with_capacity(templates.templates().len());
        for t in templates.templates() {
            let text = PromptTemplateSet::fill(t, name);
            let len = tokenizer.encoded_len(&text);
            if len > ctx {
                bail!(Input, "template `{t}` with class `{name}` needs {len} tokens, context holds {ctx}");
            }
            tokens.push(tokenizer.encode(&text)?);
        }
        let emb = normalize_rows(&embed(&tokens)?)?;
        if emb.rank() != 2 || emb.shape()[0] != tokens.len() {
            bail!(Dimension, "text embedding {:?} for {} prompts", emb.shape(), tokens.len());
        }
        d = emb.shape()[1];
        let mut mean = alloc::vec![0.0; d];
        for row in emb.data().chunks(d) {
            for (m, v) in mean.iter_mut().zip(row) {
                *m += v;
            }
        }
        let count = tokens.len() as f64;
        mean.iter_mut().for_each(|m| *m /= count);
        rows.extend(mean);
    }
    let mean = Tensor::new(alloc::vec![class_names.len(), d], rows)?;
    ZeroShotClassifier::from_embeddings(class_names.to_vec(), normalize_rows(&mean)?)
}

/// Indices of the `k` largest scores, best first; ties go to the lower index.
pub fn top_k(scores: &[f64], k: usize) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..scores.len()).collect();
    idx.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
    idx.truncate(k);
    idx
}

/// Accuracy summary of a zero-shot run.
#[derive(Debug, Clone, PartialEq)]
pub struct ClassifyResult {
    pub top1: f64,
    /// Top-`top5_k` accuracy, where `top5_k = min(5, classes)`.
    pub top5: f64,
    pub top5_k: usize,
    /// Ranked class indices per sample (length `top5_k`).
    pub predictions: Vec<Vec<usize>>,
}

/// Cosine scores `[n, classes]` of image embeddings against a classifier.
pub fn zero_shot_scores(image_embeddings: &Tensor, classifier: &ZeroShotClassifier) -> Result<Tensor> {
    if !image_embeddings.is_finite() {
        bail!(Numeric, "image embeddings contain non-finite values");
    }
    let w = classifier.embeddings();
    if image_embeddings.rank() != 2 || image_embeddings.shape()[1] != w.shape()[1] {
        bail!(Dimension, "image embeddings {:?} vs classifier {:?}", image_embeddings.shape(), w.shape());
    }
    let x = normalize_rows(image_embeddings)?;
    let (n, d, c) = (x.shape()[0], x.shape()[1], w.shape()[0]);
    let mut out = Vec::with_capacity(n * c);
    for row in x.data().chunks(d) {
        for class in w.data().chunks(d) {
            out.push(dot(row, class));
        }
    }
    Tensor::new(alloc::vec![n, c], out)
}

/// Top-1 and top-5 accuracy (fractions) of cosine-scored predictions.
pub fn classify_zero_shot(image_embeddings: &Tensor, classifier: &ZeroShotClassifier, labels: &[usize]) -> Result<ClassifyResult> {
    let scores = zero_shot_scores(image_embeddings, classifier)?;
    let (n, c) = (scores.shape()[0], scores.shape()[1]);
    if labels.len() != n {
        bail!(Dimension, "{} labels for {n} embeddings", labels.len());
    }
    if n == 0 {
        bail!(Input, "no samples to classify");
    }
    if let Some(&bad) = labels.iter().find(|&&l| l >= c) {
        bail!(Input, "label {bad} outside {c} classes");
    }
    let k = c.min(5);
    let predictions: Vec<Vec<usize>> = scores.data().chunks(c).map(|row| top_k(row, k)).collect();
    let hits1 = predictions.iter().zip(labels).filter(|(p, &l)| p[0] == l).count();
    let hits5 = predictions.iter().zip(labels).filter(|(p, l)| p.contains(l)).count();
    Ok(ClassifyResult { top1: hits1 as f64 / n as f64, top5: hits5 as f64 / n as f64, top5_k: k, predictions })
}
